"""Presets, AdamW, the training loop and metric records."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .analytics import route_stats, sparsity
from .data import TokenDataset, lm_batch
from .errors import ConfigError, NumericalError, ValidationError
from .lora import LoraConfig, inject
from .mod_head import ModConfig, ModHead, init_head
from .model import TransformerModel, count_params, named_parameters
from .objectives import baseline_losses, mod_losses

PRESETS = ("lora_all", "lora_not_k", "lora_all_plus_mod", "lora_not_k_plus_mod",
           "mod_only", "full_baseline")
MOD_PRESETS = ("lora_all_plus_mod", "lora_not_k_plus_mod", "mod_only")
METRICS_SCHEMA = "# modtune-metrics v1"


@dataclass
class TrainConfig:
    preset: str = "full_baseline"
    lr: float = 3e-4
    batch_size: int = 16
    epochs: int = 2
    max_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 50
    eval_rows: int | None = None
    probe_k: int = 0

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"train.preset must be one of {PRESETS}, got {self.preset!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("train.lr, train.batch_size and train.epochs must be positive")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("train.max_steps must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("train.eval_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRecord:
    step: int
    split: str
    loss_task: float
    loss_distill: float
    loss_total: float
    loss_route: list[float] = field(default_factory=list)
    sparsity_route: list[float] = field(default_factory=list)
    mean_route: list[float] = field(default_factory=list)
    var_route: list[float] = field(default_factory=list)
    tokens_seen: int = 0


def metrics_columns(n_routes: int) -> list[str]:
    cols = ["step", "split", "loss_task", "loss_distill", "loss_total"]
    for stem in ("loss_route", "sparsity_route", "mean_route", "var_route"):
        cols += [f"{stem}_{i}" for i in range(n_routes)]
    return cols + ["tokens_seen"]


def record_row(rec: MetricsRecord, n_routes: int) -> list:
    def pad(vals):
        vals = [repr(float(v)) for v in vals]
        return vals + [""] * (n_routes - len(vals))

    return ([rec.step, rec.split, repr(rec.loss_task), repr(rec.loss_distill), repr(rec.loss_total)]
            + pad(rec.loss_route) + pad(rec.sparsity_route) + pad(rec.mean_route)
            + pad(rec.var_route) + [rec.tokens_seen])


class MetricsWriter:
    """Streams records to CSV; the first line carries the schema version."""

    def __init__(self, path, n_routes: int):
        self.n_routes = n_routes
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._fh.write(METRICS_SCHEMA + "\n")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(metrics_columns(n_routes))

    def __call__(self, rec: MetricsRecord) -> None:
        self._csv.writerow(record_row(rec, self.n_routes))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\r\n")
        if first != METRICS_SCHEMA:
            raise ValidationError(f"{path}: unsupported metrics schema line {first!r}")
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


# presets


def setup_preset(model: TransformerModel, preset: str, mod_cfg: ModConfig | None = None,
                 lora_cfg: LoraConfig | None = None, seed: int | None = None) -> ModHead | None:
    """Attach the adapters and head a preset needs, then set trainable flags.

    ``mod_cfg.k`` also defines the late-layer set excluded by ``lora_not_k``.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    n = model.cfg.n_layers
    mod_cfg = mod_cfg or ModConfig()
    mod_cfg.validate(n)
    base = lora_cfg or LoraConfig()
    kw = dict(rank=base.rank, alpha=base.alpha, target_projections=base.target_projections)
    if preset in ("lora_all", "lora_all_plus_mod"):
        inject(model, LoraConfig.all_layers(n, **kw), seed)
    elif preset in ("lora_not_k", "lora_not_k_plus_mod"):
        inject(model, LoraConfig.excluding_last(n, mod_cfg.k, **kw), seed)
    head = init_head(model, mod_cfg, seed) if preset in MOD_PRESETS else None
    apply_preset(model, head, preset)
    return head


def apply_preset(model: TransformerModel, head: ModHead | None, preset: str) -> None:
    """Set ``requires_grad`` so exactly the preset's parameter groups train."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    if preset in MOD_PRESETS and head is None:
        raise ConfigError(f"preset {preset} needs a MoD head")
    if preset in ("lora_all", "lora_not_k") and head is not None:
        raise ConfigError(f"preset {preset} does not use a MoD head")
    uses_lora = preset.startswith("lora_")
    if uses_lora and not model.adapters:
        raise ConfigError(f"preset {preset} needs LoRA adapters")
    if preset == "mod_only" and model.adapters:
        raise ConfigError("preset mod_only does not use LoRA adapters")
    if uses_lora:
        mask = model.lora_cfg.mask_for(model.cfg.n_layers)
        if preset.startswith("lora_all") and not all(mask):
            raise ConfigError(f"preset {preset} needs adapters on every layer")
        if preset.startswith("lora_not_k"):
            k = head.k if head is not None else sum(1 for m in mask[::-1] if not m)
            if k < 1 or any(mask[-k:]) or not all(mask[:-k]):
                raise ConfigError(f"preset {preset} needs adapters on all but the last k layers")
    trainable = {"full_baseline": {"base", "lora", "mod_routing", "mod_norms"},
                 "lora_all": {"lora"}, "lora_not_k": {"lora"},
                 "lora_all_plus_mod": {"lora", "mod_routing", "mod_norms"},
                 "lora_not_k_plus_mod": {"lora", "mod_routing", "mod_norms"},
                 "mod_only": {"mod_routing", "mod_norms"}}[preset]
    for _, t, group in named_parameters(model, head):
        t.requires_grad = group in trainable


def group_counts(model: TransformerModel, head: ModHead | None = None) -> dict:
    out = {}
    for group in ("base", "lora", "mod_routing", "mod_norms"):
        out[group] = {"total": count_params(model, head, group=group),
                      "trainable": count_params(model, head, trainable_only=True, group=group)}
    out["trainable_total"] = count_params(model, head, trainable_only=True)
    return out


# optimisation


class AdamW:
    def __init__(self, params: list, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.beta1, self.beta2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.dtype, copy=False)


def global_grad_norm(params: Iterable) -> float:
    # fsum is exactly rounded, so the norm does not depend on parameter order
    return math.sqrt(math.fsum(float(np.sum(p.grad.astype(np.float64) ** 2))
                               for p in params if p.grad is not None))


def clip_gradients(params: list, max_norm: float) -> float:
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise NumericalError("non-finite gradient norm")
    if max_norm and norm > max_norm:
        coef = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * coef).astype(p.dtype, copy=False)
    return norm


# evaluation


@dataclass
class _Window:
    n_routes: int
    task: float = 0.0
    distill: float = 0.0
    total: float = 0.0
    routes: list = field(default_factory=list)
    tokens: int = 0
    weights: list = field(default_factory=list)

    def add(self, bundle, n_tok: int, weights=None) -> None:
        f = bundle.as_floats()
        self.task += f["task"] * n_tok
        self.distill += f["distill"] * n_tok
        self.total += f["total"] * n_tok
        if not self.routes:
            self.routes = [0.0] * len(bundle.per_route_task)
        self.routes = [a + b * n_tok for a, b in zip(self.routes, bundle.per_route_task)]
        self.tokens += n_tok
        if weights is not None:
            self.weights.append(weights)

    def record(self, step: int, split: str, tokens_seen: int, epsilon: float) -> MetricsRecord:
        n = max(self.tokens, 1)
        rec = MetricsRecord(step, split, self.task / n, self.distill / n, self.total / n,
                            [r / n for r in self.routes], tokens_seen=tokens_seen)
        if self.weights:
            w = np.concatenate(self.weights, axis=0)
            rec.sparsity_route = list(sparsity(w, epsilon))
            mu, var = route_stats(w)
            rec.mean_route, rec.var_route = list(mu), list(var)
        return rec


def _batch_losses(model, head, rows, probe_k):
    inputs, targets, mask = lm_batch(rows)
    if head is not None:
        bundle, out = mod_losses(model, head, inputs, targets, mask)
        return bundle, out.weights.data[mask], int(mask.sum())
    bundle = baseline_losses(model, inputs, targets, mask, probe_k=probe_k)
    return bundle, None, int(mask.sum())


def evaluate(model: TransformerModel, head: ModHead | None, rows: np.ndarray,
             batch_size: int = 16, probe_k: int = 0, step: int = 0,
             tokens_seen: int = 0) -> MetricsRecord:
    """Token-weighted losses and routing statistics over ``rows``, no gradients."""
    eps = head.cfg.epsilon_sparsity if head is not None else 1e-5
    win = _Window(head.k if head is not None else probe_k)
    with ad.no_grad():
        for s in range(0, len(rows), batch_size):
            bundle, w, n_tok = _batch_losses(model, head, rows[s:s + batch_size], probe_k)
            if n_tok:
                win.add(bundle, n_tok, w)
    return win.record(step, "eval", tokens_seen, eps)


# training


@dataclass
class TrainResult:
    records: list
    steps: int
    tokens_seen: int
    wall_clock: float
    final_eval: MetricsRecord | None
    param_counts: dict


def _finite_or_raise(bundle, step, sink):
    total = bundle.total.item()
    if not math.isfinite(total):
        rec = MetricsRecord(step, "nan_abort", bundle.task.item(), bundle.distill.item(), total)
        if sink is not None:
            sink(rec)
        raise NumericalError(f"non-finite loss {total} at step {step}")


def total_steps(n_rows: int, cfg: TrainConfig) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.epochs * math.ceil(n_rows / cfg.batch_size)


def batch_order(n_rows: int, cfg: TrainConfig):
    """Infinite stream of row-index batches; a pure function of the seed."""
    epoch = 0
    while True:
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n_rows)
        for s in range(0, n_rows, cfg.batch_size):
            yield perm[s:s + cfg.batch_size]
        epoch += 1


def train(model: TransformerModel, head: ModHead | None, data: TokenDataset, cfg: TrainConfig,
          sink: Callable[[MetricsRecord], None] | None = None) -> TrainResult:
    """Tune the preset's parameter groups; every other parameter stays bit-identical.

    An eval record is logged at step 0, then train and eval records every
    ``eval_every`` steps and at the final step.
    """
    cfg.validate()
    apply_preset(model, head, cfg.preset)
    if len(data.train) == 0:
        raise ValidationError("empty training split")
    params = [t for _, t, _ in named_parameters(model, head) if t.requires_grad]
    opt = AdamW(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    eval_rows = data.val if cfg.eval_rows is None else data.val[:cfg.eval_rows]
    n_routes = head.k if head is not None else cfg.probe_k
    eps = head.cfg.epsilon_sparsity if head is not None else 1e-5
    records: list[MetricsRecord] = []

    def log(rec):
        records.append(rec)
        if sink is not None:
            sink(rec)

    def log_eval(step, seen):
        if len(eval_rows):
            log(evaluate(model, head, eval_rows, cfg.batch_size, cfg.probe_k, step, seen))

    steps = total_steps(len(data.train), cfg)
    start = time.perf_counter()
    tokens_seen = 0
    log_eval(0, 0)
    win = _Window(n_routes)
    batches = batch_order(len(data.train), cfg)
    for step in range(1, steps + 1):
        rows = data.train[next(batches)]
        with ad.Tape():
            bundle, w, n_tok = _batch_losses(model, head, rows, cfg.probe_k)
        _finite_or_raise(bundle, step, sink)
        ad.backward(bundle.total)
        clip_gradients(params, cfg.grad_clip)
        opt.step()
        tokens_seen += n_tok
        win.add(bundle, n_tok, w)
        if step % cfg.eval_every == 0 or step == steps:
            log(win.record(step, "train", tokens_seen, eps))
            win = _Window(n_routes)
            log_eval(step, tokens_seen)
    final_eval = next((r for r in reversed(records) if r.split == "eval"), None)
    return TrainResult(records, steps, tokens_seen, time.perf_counter() - start, final_eval,
                       group_counts(model, head))
