"""Mixture-of-Depths ensemble head over the last ``k`` layers.

Route ``i`` reads the output of layer ``n - k + 1 + i``, so route ``k - 1`` is
the final layer. The router sees ``H_{n-k}``, the state entering the routed
range, and produces one weight vector per token.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, ValidationError
from .model import ForwardTrace, TransformerModel, lm_head


@dataclass
class ModConfig:
    k: int = 3
    top_k: int | None = None
    lam: float = 1e-4
    routing_init_std: float = 0.02
    use_trainable_norms: bool = True
    detach_teacher: bool = True
    epsilon_sparsity: float = 1e-5

    def validate(self, n_layers: int | None = None) -> None:
        if self.k < 1:
            raise ConfigError("mod.k must be at least 1")
        if n_layers is not None and self.k > n_layers:
            raise ConfigError(f"mod.k={self.k} exceeds the model's {n_layers} layers")
        if self.top_k is not None and not 1 <= self.top_k <= self.k:
            raise ConfigError(f"mod.top_k={self.top_k} outside [1, {self.k}]")
        if self.lam < 0:
            raise ConfigError("mod.lambda must be non-negative")
        if self.routing_init_std < 0 or self.epsilon_sparsity <= 0:
            raise ConfigError("mod.routing_init_std must be >= 0 and mod.epsilon_sparsity > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModConfig":
        return cls(**d)


@dataclass
class ModHead:
    cfg: ModConfig
    w_g: Tensor                      # d x k
    norms: list | None               # k (gamma, beta) pairs, None for the w.o. N_k ablation
    route_layer_map: list[int]

    @property
    def k(self) -> int:
        return self.cfg.k

    @property
    def router_layer(self) -> int:
        return self.route_layer_map[0] - 1

    def parameters(self) -> list[Tensor]:
        out = [self.w_g]
        for g, b in self.norms or ():
            out += [g, b]
        return out


@dataclass
class EnsembleOutput:
    route_logits: list   # k tensors batch x seq x V
    route_probs: list    # softmax of each route
    weights: Tensor      # batch x seq x k
    ensemble_logits: Tensor


def init_head(model: TransformerModel, cfg: ModConfig, seed: int | None = None) -> ModHead:
    """Gaussian router, per-route norms copied from the pretrained final norm."""
    n = model.cfg.n_layers
    cfg.validate(n)
    d = model.cfg.d_model
    rng = np.random.default_rng([model.cfg.seed if seed is None else seed, 0x30D])
    w_g = Tensor(rng.normal(0.0, cfg.routing_init_std, size=(d, cfg.k)).astype(model.dtype),
                 name="mod.w_g")
    norms = None
    if cfg.use_trainable_norms:
        gp = model.params["norm_p.gamma"].data
        bp = model.params["norm_p.beta"].data
        norms = [(Tensor(gp.copy(), name=f"mod.norm.{i}.gamma"),
                  Tensor(bp.copy(), name=f"mod.norm.{i}.beta")) for i in range(cfg.k)]
    layer_map = [n - cfg.k + 1 + i for i in range(cfg.k)]
    return ModHead(cfg=cfg, w_g=w_g, norms=norms, route_layer_map=layer_map)


def _route_norm(model: TransformerModel, head: ModHead, i: int, h: Tensor) -> Tensor:
    if head.norms is None:
        gamma, beta = model.params["norm_p.gamma"], model.params["norm_p.beta"]
    else:
        gamma, beta = head.norms[i]
    return ad.layer_norm(h, gamma, beta, model.cfg.norm_eps)


def exit_logits(model: TransformerModel, head: ModHead, trace: ForwardTrace, i: int,
                positions=None) -> Tensor:
    """Early-exit logits of route ``i``; ``positions`` optionally slices the seq axis."""
    if not 0 <= i < head.k:
        raise ValidationError(f"route {i} outside [0, {head.k})")
    h = trace[head.route_layer_map[i]]
    if positions is not None:
        h = ad.index(h, (slice(None), positions))
    return lm_head(model, _route_norm(model, head, i, h))


def route_scores(head: ModHead, x: Tensor) -> Tensor:
    if x.shape[-1] != head.w_g.shape[0]:
        raise ShapeError(f"routing input width {x.shape[-1]} != {head.w_g.shape[0]}")
    return ad.matmul(x, head.w_g)


def route_tiebreak(scores, top_k: int) -> np.ndarray:
    """Top-K route indices per token, ties resolved toward the deeper route."""
    return ad.topk_indices(scores, top_k, axis=-1, prefer_high=True)


def topk_keep_mask(scores, top_k: int) -> np.ndarray:
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    idx = route_tiebreak(data, top_k)
    keep = np.zeros(data.shape, dtype=bool)
    np.put_along_axis(keep, idx, True, axis=-1)
    return keep


def route_dense(head: ModHead, x: Tensor) -> Tensor:
    return ad.softmax(route_scores(head, x), axis=-1)


def masked_route_softmax(scores: Tensor, top_k: int) -> Tensor:
    if top_k == scores.shape[-1]:
        return ad.softmax(scores, axis=-1)
    keep = topk_keep_mask(scores, top_k)
    return ad.softmax(ad.masked_fill(scores, ~keep, -np.inf), axis=-1)


def route_topk(head: ModHead, x: Tensor, top_k: int) -> Tensor:
    """Softmax over each token's top-K scores; the other routes get exactly 0."""
    if not 1 <= top_k <= head.k:
        raise ValidationError(f"top_k={top_k} outside [1, {head.k}]")
    return masked_route_softmax(route_scores(head, x), top_k)


def route_weights(head: ModHead, x: Tensor) -> Tensor:
    if head.cfg.top_k is None:
        return route_dense(head, x)
    return route_topk(head, x, head.cfg.top_k)


def combine(route_logits, weights: Tensor) -> Tensor:
    """Per-token weighted sum of route logits, accumulated in route order."""
    out = None
    for i, logits in enumerate(route_logits):
        term = ad.mul(ad.index(weights, (Ellipsis, slice(i, i + 1))), logits)
        out = term if out is None else out + term
    return out


def ensemble(model: TransformerModel, head: ModHead, trace: ForwardTrace,
             with_probs: bool = True) -> EnsembleOutput:
    weights = route_weights(head, trace[head.router_layer])
    route_logits = [exit_logits(model, head, trace, i) for i in range(head.k)]
    probs = [ad.softmax(l, axis=-1) for l in route_logits] if with_probs else []
    return EnsembleOutput(route_logits, probs, weights, combine(route_logits, weights))
