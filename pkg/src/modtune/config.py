"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, keys are namespaced
(``model.d_model``, ``mod.k``, ``train.lr``). Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigError
from .inference import GenConfig
from .lora import LoraConfig
from .mod_head import ModConfig
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass
class RunOptions:
    checkpoint: str | None = None
    dtype: str = "float32"
    sweep_max_k: int = 6
    sweep_preset: str = "lora_not_k_plus_mod"
    sweep_exit_prompts: int = 8
    eval_max_prompts: int = 64
    gen_prompt: str = ""
    analyze_metrics: str | None = None
    analyze_window: int = 3
    analyze_split: str = "train"
    gradcheck_tol: float = 1e-4
    gradcheck_h: float = 1e-5
    gradcheck_lambda: float = 0.1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    mod: ModConfig = field(default_factory=ModConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    gen: GenConfig = field(default_factory=GenConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            obj = getattr(self, f.name)
            out[f.name] = obj.to_dict() if hasattr(obj, "to_dict") else dict(vars(obj))
        return out


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _opt_int(s: str):
    return None if s.lower() in ("none", "") else int(s)


def _str_tuple(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _opt_str(s: str):
    return None if s.lower() in ("none", "") else s


# key -> (section, attribute, parser)
SCHEMA = {
    "model.vocab_size": ("model", "vocab_size", int),
    "model.d_model": ("model", "d_model", int),
    "model.n_layers": ("model", "n_layers", int),
    "model.n_heads": ("model", "n_heads", int),
    "model.d_ff": ("model", "d_ff", int),
    "model.max_seq_len": ("model", "max_seq_len", int),
    "model.norm_eps": ("model", "norm_eps", float),
    "model.tie_embeddings": ("model", "tie_embeddings", _bool),
    "model.seed": ("model", "seed", int),
    "lora.rank": ("lora", "rank", int),
    "lora.alpha": ("lora", "alpha", float),
    "lora.targets": ("lora", "target_projections", _str_tuple),
    "mod.k": ("mod", "k", int),
    "mod.top_k": ("mod", "top_k", _opt_int),
    "mod.lambda": ("mod", "lam", float),
    "mod.routing_init_std": ("mod", "routing_init_std", float),
    "mod.use_trainable_norms": ("mod", "use_trainable_norms", _bool),
    "mod.detach_teacher": ("mod", "detach_teacher", _bool),
    "mod.epsilon_sparsity": ("mod", "epsilon_sparsity", float),
    "train.preset": ("train", "preset", str),
    "train.lr": ("train", "lr", float),
    "train.batch_size": ("train", "batch_size", int),
    "train.epochs": ("train", "epochs", int),
    "train.max_steps": ("train", "max_steps", _opt_int),
    "train.beta1": ("train", "beta1", float),
    "train.beta2": ("train", "beta2", float),
    "train.adam_eps": ("train", "adam_eps", float),
    "train.weight_decay": ("train", "weight_decay", float),
    "train.grad_clip": ("train", "grad_clip", float),
    "train.seed": ("train", "seed", int),
    "train.eval_every": ("train", "eval_every", int),
    "train.eval_rows": ("train", "eval_rows", _opt_int),
    "train.probe_k": ("train", "probe_k", int),
    "data.kind": ("data", "kind", str),
    "data.path": ("data", "path", _opt_str),
    "data.digits": ("data", "digits", int),
    "data.n_samples": ("data", "n_samples", int),
    "data.copy_len": ("data", "copy_len", int),
    "data.copy_alphabet": ("data", "copy_alphabet", str),
    "data.seq_len": ("data", "seq_len", int),
    "data.train_frac": ("data", "train_frac", float),
    "data.seed": ("data", "seed", int),
    "gen.mode": ("gen", "mode", str),
    "gen.temperature": ("gen", "temperature", float),
    "gen.max_new_tokens": ("gen", "max_new_tokens", int),
    "gen.early_exit": ("gen", "early_exit", _bool),
    "gen.cache_mode": ("gen", "cache_mode", str),
    "gen.seed": ("gen", "seed", int),
    "gen.prompt": ("run", "gen_prompt", str),
    "run.checkpoint": ("run", "checkpoint", _opt_str),
    "run.dtype": ("run", "dtype", str),
    "sweep.max_k": ("run", "sweep_max_k", int),
    "sweep.preset": ("run", "sweep_preset", str),
    "sweep.exit_prompts": ("run", "sweep_exit_prompts", int),
    "eval.max_prompts": ("run", "eval_max_prompts", int),
    "analyze.metrics": ("run", "analyze_metrics", _opt_str),
    "analyze.window": ("run", "analyze_window", int),
    "analyze.split": ("run", "analyze_split", str),
    "gradcheck.tolerance": ("run", "gradcheck_tol", float),
    "gradcheck.h": ("run", "gradcheck_h", float),
    "gradcheck.lambda": ("run", "gradcheck_lambda", float),
}

PATH_KEYS = ("data.path", "run.checkpoint", "analyze.metrics")


def parse_lines(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Raw ``key -> (value, line number)``; syntax errors name the line."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first on line {out[key][1]})")
        out[key] = (value, lineno)
    return out


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    cfg = RunConfig()
    for key, (value, lineno) in parse_lines(text, source).items():
        section, attr, conv = SCHEMA[key]
        try:
            parsed = conv(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
        if key in PATH_KEYS and parsed and base_dir is not None and not Path(parsed).is_absolute():
            parsed = str(base_dir / parsed)
        setattr(getattr(cfg, section), attr, parsed)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path), path.parent)


def with_overrides(cfg: RunConfig, preset=None, k=None, top_k=None, lam=None) -> RunConfig:
    if preset is not None:
        cfg.train = replace(cfg.train, preset=preset)
    mod = {}
    if k is not None:
        mod["k"] = k
    if top_k is not None:
        mod["top_k"] = top_k
    if lam is not None:
        mod["lam"] = lam
    if mod:
        cfg.mod = replace(cfg.mod, **mod)
    return cfg
