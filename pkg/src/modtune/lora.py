"""Low-rank adapters with a per-layer include mask."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, StateError
from .model import PROJECTIONS, TransformerModel, project

DEFAULT_TARGETS = ("attn_q", "attn_v", "mlp_out")


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    target_projections: tuple[str, ...] = DEFAULT_TARGETS
    layer_mask: list[bool] | None = None  # None means every layer

    def mask_for(self, n_layers: int) -> list[bool]:
        if self.layer_mask is None:
            return [True] * n_layers
        if len(self.layer_mask) != n_layers:
            raise ConfigError(f"lora layer_mask has {len(self.layer_mask)} entries, model has {n_layers} layers")
        return [bool(m) for m in self.layer_mask]

    @classmethod
    def all_layers(cls, n_layers: int, **kw) -> "LoraConfig":
        return cls(layer_mask=[True] * n_layers, **kw)

    @classmethod
    def excluding_last(cls, n_layers: int, k: int, **kw) -> "LoraConfig":
        """Adapters everywhere except the last ``k`` layers."""
        return cls(layer_mask=[i < n_layers - k for i in range(n_layers)], **kw)

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha,
                "target_projections": list(self.target_projections),
                "layer_mask": None if self.layer_mask is None else list(self.layer_mask)}

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        return cls(rank=int(d["rank"]), alpha=float(d["alpha"]),
                   target_projections=tuple(d["target_projections"]),
                   layer_mask=d.get("layer_mask"))


@dataclass
class LoraLayer:
    A: Tensor  # rank x d_in
    B: Tensor  # d_out x rank
    base_weight: str
    scaling: float = field(default=1.0)


def _proj_dims(model: TransformerModel, proj: str) -> tuple[int, int]:
    w = model.params[f"blocks.0.{proj}.weight"]
    return w.shape


def inject(model: TransformerModel, cfg: LoraConfig, seed: int | None = None) -> TransformerModel:
    """Attach adapters in place; ``B`` starts at zero so outputs are unchanged."""
    if model.adapters or model.lora_cfg is not None:
        raise StateError("model already has LoRA adapters")
    bad = set(cfg.target_projections) - set(PROJECTIONS)
    if bad:
        raise ConfigError(f"unknown LoRA target projections: {sorted(bad)}")
    if cfg.rank < 1 or cfg.rank > model.cfg.d_model:
        raise ConfigError("lora rank must be in [1, d_model]")
    mask = cfg.mask_for(model.cfg.n_layers)
    rng = np.random.default_rng([model.cfg.seed if seed is None else seed, 0x10A])
    dtype = model.dtype
    for layer in range(model.cfg.n_layers):
        if not mask[layer]:
            continue
        for proj in PROJECTIONS:
            if proj not in cfg.target_projections:
                continue
            d_in, d_out = _proj_dims(model, proj)
            a = Tensor(rng.normal(0.0, 0.02, size=(cfg.rank, d_in)).astype(dtype),
                       name=f"lora.{layer}.{proj}.A")
            b = Tensor(np.zeros((d_out, cfg.rank), dtype=dtype), name=f"lora.{layer}.{proj}.B")
            model.adapters[(layer, proj)] = LoraLayer(a, b, f"blocks.{layer}.{proj}.weight",
                                                      cfg.alpha / cfg.rank)
    model.lora_cfg = cfg
    return model


def adapter_param_count(model: TransformerModel) -> int:
    """Parameters one fully adapted layer adds under the model's LoRA config."""
    cfg = model.lora_cfg
    total = 0
    for proj in cfg.target_projections:
        d_in, d_out = _proj_dims(model, proj)
        total += cfg.rank * (d_in + d_out)
    return total


def merged_weight(model: TransformerModel, layer: int, proj: str) -> np.ndarray:
    ada = model.adapters[(layer, proj)]
    w = model.params[ada.base_weight].data
    return w + ada.scaling * (ada.B.data @ ada.A.data).T


def merge_check(model: TransformerModel, n_probes: int = 10, seed: int = 0) -> float:
    """Largest gap between the adapter path and an explicitly merged matrix."""
    if not model.adapters:
        raise StateError("model has no adapters")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for (layer, proj) in model.adapters:
        w = model.params[f"blocks.{layer}.{proj}.weight"]
        x = rng.normal(size=(n_probes, w.shape[0])).astype(model.dtype)
        adapted = project(model, layer, proj, ad.Tensor(x)).data
        merged = x @ merged_weight(model, layer, proj) + model.params[f"blocks.{layer}.{proj}.bias"].data
        worst = max(worst, float(np.max(np.abs(adapted - merged))))
    return worst
