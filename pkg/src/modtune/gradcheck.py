"""Central finite-difference checks of analytic gradients (64-bit)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .lora import LoraConfig
from .mod_head import ModConfig
from .model import ModelConfig, init_model, named_parameters
from .objectives import mod_losses
from .trainer import setup_preset

TINY = ModelConfig(vocab_size=11, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=8, seed=7)


@dataclass
class ParamCheck:
    name: str
    group: str
    size: int
    max_rel_err: float
    worst_index: tuple
    failures: list = field(default_factory=list)


@dataclass
class GradcheckReport:
    passed: bool
    tolerance: float
    max_rel_err: float
    params: list
    runtime: float

    def failures(self) -> list[str]:
        out = []
        for p in self.params:
            for idx, analytic, numeric, rel in p.failures:
                out.append(f"{p.name}{list(idx)}: analytic={analytic:.6e} numeric={numeric:.6e} rel={rel:.3e}")
        return out

    def to_json(self) -> dict:
        return {"passed": self.passed, "tolerance": self.tolerance,
                "max_rel_err": self.max_rel_err, "runtime": self.runtime,
                "params": [{"name": p.name, "group": p.group, "size": p.size,
                            "max_rel_err": p.max_rel_err, "worst_index": list(p.worst_index)}
                           for p in self.params],
                "failures": self.failures()}


def relative_error(analytic, numeric, floor: float = 1e-6):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries meaningful."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(loss_fn: Callable[[], float], t: ad.Tensor, h: float = 1e-5) -> np.ndarray:
    out = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return out


def check_gradients(loss_fn: Callable[[], ad.Tensor], named, h: float = 1e-5,
                    tol: float = 1e-4, floor: float = 1e-6) -> GradcheckReport:
    """Compare backward() against central differences for every ``(name, tensor, group)``.

    ``loss_fn`` must build its graph on the active tape and be deterministic.
    """
    start = time.perf_counter()
    with ad.Tape():
        loss = loss_fn()
    ad.backward(loss)
    analytic = {id(t): (np.zeros(t.shape) if t.grad is None else t.grad.copy()) for _, t, _ in named}

    def value():
        with ad.no_grad():
            return loss_fn().item()

    checks = []
    worst = 0.0
    for name, t, group in named:
        num = numeric_grad(value, t, h)
        rel = relative_error(analytic[id(t)], num, floor)
        idx = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        pmax = float(rel.max()) if rel.size else 0.0
        bad = [(tuple(int(i) for i in j), float(analytic[id(t)][j]), float(num[j]), float(rel[j]))
               for j in zip(*np.nonzero(rel >= tol))]
        checks.append(ParamCheck(name, group, t.data.size, pmax, tuple(int(i) for i in idx), bad))
        worst = max(worst, pmax)
    return GradcheckReport(worst < tol, tol, worst, checks, time.perf_counter() - start)


def mod_gradcheck(model_cfg: ModelConfig = TINY, k: int = 2, lam: float = 0.1,
                  preset: str = "lora_all_plus_mod", batch: int = 2, seq: int = 6,
                  h: float = 1e-5, tol: float = 1e-4, seed: int = 0,
                  top_k: int | None = None) -> GradcheckReport:
    """Full MoD loss on a tiny model; checks base, LoRA, router and route norms.

    Weights are redrawn at a larger scale and adapters, router and route norms
    are moved off their initial values, so that no gradient is trivially zero
    or buried under finite-difference roundoff. The teacher is not detached here:
    detaching is a deliberate deviation from the true derivative, which the
    finite differences would flag.
    """
    rng = np.random.default_rng(seed)
    model = init_model(model_cfg, dtype=np.float64)
    for name, t in model.params.items():
        if name.endswith(("weight", "emb")):
            t.data = rng.normal(0, 0.5, size=t.shape)
        elif name.endswith(("gamma", "beta", "bias")):
            t.data = t.data + rng.normal(0, 0.1, size=t.shape)
    head = setup_preset(model, preset, ModConfig(k=k, lam=lam, top_k=top_k, detach_teacher=False),
                        LoraConfig(rank=2, alpha=4.0), seed=seed)
    for ada in model.adapters.values():
        ada.B.data = rng.normal(0, 0.1, size=ada.B.shape)
    if head is not None:
        head.w_g.data = rng.normal(0, 0.5, size=head.w_g.shape)
        for g, b in head.norms or ():
            g.data = g.data + rng.normal(0, 0.1, size=g.shape)
            b.data = b.data + rng.normal(0, 0.1, size=b.shape)
    named = named_parameters(model, head)
    for _, t, _ in named:
        t.requires_grad = True
    tokens = rng.integers(0, model_cfg.vocab_size, size=(batch, seq + 1))
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    mask = np.ones(targets.shape, dtype=bool)
    mask[-1, -1] = False

    def loss_fn():
        bundle, _ = mod_losses(model, head, inputs, targets, mask)
        return bundle.total

    return check_gradients(loss_fn, named, h=h, tol=tol)
