"""Binary named-tensor checkpoints with a JSON sidecar.

Layout (all integers little-endian)::

    b"MODCKPT1"
    u32 entry count
    per entry: u16 name length, UTF-8 name, u8 dtype code, u8 rank,
               rank x u32 dims, row-major payload

Dtype code 0 is float32; code 1 (float64) is an extension used for 64-bit
runs. The sidecar ``<path>.json`` holds the model, LoRA and MoD configs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .lora import LoraConfig, inject
from .mod_head import ModConfig, ModHead, init_head
from .model import ModelConfig, TransformerModel, init_model, named_parameters

MAGIC = b"MODCKPT1"
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def encode_tensors(entries) -> bytes:
    """Serialise ``(name, array)`` pairs in the given order."""
    entries = list(entries)
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise ValidationError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValidationError(f"{name}: name or rank too large")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise ValidationError("not a MODCKPT1 file")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValidationError("truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in CODE_DTYPES:
            raise ValidationError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = CODE_DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(take(size), dtype=dt).reshape(dims).copy()
    if pos != len(buf):
        raise ValidationError("trailing bytes after last checkpoint entry")
    return out


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(path, model: TransformerModel, head: ModHead | None = None,
                    extra: dict | None = None) -> None:
    entries = [(name, t.data) for name, t, _ in named_parameters(model, head)]
    Path(path).write_bytes(encode_tensors(entries))
    meta = {"model": model.cfg.to_dict(),
            "lora": model.lora_cfg.to_dict() if model.lora_cfg is not None else None,
            "mod": head.cfg.to_dict() if head is not None else None,
            "dtype": str(model.dtype)}
    meta.update(extra or {})
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> tuple[TransformerModel, ModHead | None, dict]:
    """Rebuild the model (and head, if saved) exactly as written."""
    try:
        meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
        tensors = decode_tensors(Path(path).read_bytes())
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from exc
    dtype = np.dtype(meta.get("dtype", "float32"))
    model = init_model(ModelConfig(**meta["model"]), dtype=dtype)
    if meta.get("lora"):
        inject(model, LoraConfig.from_dict(meta["lora"]))
    head = init_head(model, ModConfig.from_dict(meta["mod"])) if meta.get("mod") else None
    expected = {name: t for name, t, _ in named_parameters(model, head)}
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        unknown = sorted(set(tensors) - set(expected))
        raise ValidationError(f"checkpoint entries mismatch: missing={missing} unknown={unknown}")
    for name, t in expected.items():
        arr = tensors[name]
        if arr.shape != t.shape:
            raise ValidationError(f"{name}: shape {arr.shape} != expected {t.shape}")
        t.data = arr.astype(dtype, copy=False)
    return model, head, meta


def strip_to_base(model: TransformerModel) -> TransformerModel:
    """Copy of the base weights only (no adapters), for re-tuning."""
    fresh = init_model(model.cfg, dtype=model.dtype)
    for name, t in fresh.params.items():
        t.data = model.params[name].data.copy()
    return fresh


def clone(model: TransformerModel) -> TransformerModel:
    out = strip_to_base(model)
    if model.lora_cfg is not None:
        inject(out, model.lora_cfg)
        for key, ada in model.adapters.items():
            out.adapters[key].A.data = ada.A.data.copy()
            out.adapters[key].B.data = ada.B.data.copy()
    return out


def clone_head(model: TransformerModel, head: ModHead) -> ModHead:
    out = init_head(model, ModConfig.from_dict(head.cfg.to_dict()))
    out.w_g.data = head.w_g.data.copy()
    if head.norms is not None:
        for (g, b), (g0, b0) in zip(out.norms, head.norms):
            g.data, b.data = g0.data.copy(), b0.data.copy()
    return out
