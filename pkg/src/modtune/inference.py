"""Decoding from ensemble logits, with an optional Top-K early-exit path.

With ``cache_mode="none"`` every step recomputes the whole prefix, so the
early-exit path evaluates exactly the same operations as full compute for the
routes it keeps and emits identical tokens. ``cache_mode="propagate"`` keeps
per-layer key/value caches and fills the entries of skipped layers from the
deepest computed state, which is faster but only approximate.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import EOS
from .errors import ConfigError, ValidationError
from .mod_head import ModHead, combine, exit_logits, masked_route_softmax, route_scores, route_tiebreak
from .model import TransformerModel, block, check_tokens, final_logits, forward, project

MODES = ("greedy", "sample")
CACHE_MODES = ("none", "propagate")


@dataclass
class GenConfig:
    mode: str = "greedy"
    temperature: float = 1.0
    max_new_tokens: int = 16
    early_exit: bool = False
    cache_mode: str = "none"
    stop_at_eos: bool = True
    seed: int = 0

    def validate(self, head: ModHead | None = None) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"gen.mode must be one of {MODES}")
        if self.temperature <= 0:
            raise ConfigError("gen.temperature must be positive")
        if self.max_new_tokens < 0:
            raise ConfigError("gen.max_new_tokens must be >= 0")
        if self.cache_mode not in CACHE_MODES:
            raise ConfigError(f"gen.cache_mode must be one of {CACHE_MODES}")
        if self.early_exit and (head is None or head.cfg.top_k is None):
            raise ConfigError("early exit needs a head with top_k set")


@dataclass
class ComputeLedger:
    n_layers: int
    layers_computed: list[int] = field(default_factory=list)
    deepest_route_layer: list[int] = field(default_factory=list)
    wall_clock: float = 0.0

    def add(self, layers: int, deepest_layer: int) -> None:
        self.layers_computed.append(int(layers))
        self.deepest_route_layer.append(int(deepest_layer))

    @property
    def tokens(self) -> int:
        return len(self.layers_computed)

    @property
    def layer_forwards(self) -> int:
        return sum(self.layers_computed)

    @property
    def baseline_layer_forwards(self) -> int:
        return self.n_layers * self.tokens

    @property
    def acceleration_ratio(self) -> float:
        if not self.layer_forwards:
            return 1.0
        return self.baseline_layer_forwards / self.layer_forwards

    def merge(self, other: "ComputeLedger") -> "ComputeLedger":
        return ComputeLedger(self.n_layers, self.layers_computed + other.layers_computed,
                             self.deepest_route_layer + other.deepest_route_layer,
                             self.wall_clock + other.wall_clock)

    def to_json(self) -> dict:
        return {"n_layers": self.n_layers,
                "per_token": [{"layers_computed": l, "deepest_route_layer": d}
                              for l, d in zip(self.layers_computed, self.deepest_route_layer)],
                "tokens": self.tokens, "layer_forwards": self.layer_forwards,
                "baseline_layer_forwards": self.baseline_layer_forwards,
                "acceleration_ratio": self.acceleration_ratio, "wall_clock": self.wall_clock}


def acceleration_report(ledger: ComputeLedger, baseline_wall_clock: float | None = None) -> dict:
    """Layer-forward ratio (deterministic) and, if timed, the wall-clock ratio."""
    out = {"layer_forward_ratio": ledger.acceleration_ratio,
           "layer_forwards": ledger.layer_forwards,
           "baseline_layer_forwards": ledger.baseline_layer_forwards,
           "wall_clock": ledger.wall_clock, "wall_clock_ratio": None}
    if baseline_wall_clock is not None and ledger.wall_clock > 0:
        out["wall_clock_ratio"] = baseline_wall_clock / ledger.wall_clock
    return out


def write_ledger(path, ledger: ComputeLedger, extra: dict | None = None) -> None:
    payload = {"ledger": ledger.to_json(), "report": acceleration_report(ledger)}
    payload.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)


def _pick(logits: np.ndarray, cfg: GenConfig, rng: np.random.Generator) -> int:
    if cfg.mode == "greedy":
        return int(np.argmax(logits))
    # Gumbel-max: as temperature -> 0 this reduces to the argmax
    z = logits.astype(np.float64) / cfg.temperature + rng.gumbel(size=logits.shape)
    return int(np.argmax(z))


def _last(t: Tensor) -> Tensor:
    return ad.index(t, (slice(None), slice(-1, None)))


def _full_step(model, head, tokens) -> tuple[np.ndarray, int]:
    n = model.cfg.n_layers
    if head is None:
        trace = forward(model, tokens, keep_from=n)
        return final_logits(model, trace).data[0, -1], n
    trace = forward(model, tokens, keep_from=head.router_layer)
    scores = route_scores(head, _last(trace[head.router_layer]))
    weights = _weights_from_scores(head, scores)
    logits = [exit_logits(model, head, trace, i, positions=slice(-1, None)) for i in range(head.k)]
    return combine(logits, weights).data[0, -1], n


def _weights_from_scores(head, scores):
    if head.cfg.top_k is None:
        return ad.softmax(scores, axis=-1)
    return masked_route_softmax(scores, head.cfg.top_k)


def _early_exit_step(model, head, tokens) -> tuple[np.ndarray, int]:
    n, k, top_k = model.cfg.n_layers, head.k, head.cfg.top_k
    router_layer = head.router_layer
    trace = forward(model, tokens, upto=router_layer, keep_from=router_layer)
    scores = route_scores(head, _last(trace[router_layer]))
    selected = sorted(int(i) for i in route_tiebreak(scores.data[0, -1], top_k))
    deepest = selected[-1]
    stop = head.route_layer_map[deepest]
    h = trace[router_layer]
    for j in range(router_layer + 1, stop + 1):
        h = block(model, j - 1, h)
        trace.hiddens[j] = h
    weights = masked_route_softmax(scores, top_k)
    logits = [exit_logits(model, head, trace, i, positions=slice(-1, None)) for i in selected]
    picked = ad.index(weights, (Ellipsis, selected))
    return combine(logits, picked).data[0, -1], n - k + deepest + 1


def _check_prompt(model, prompt) -> list[int]:
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValidationError("prompt is empty")
    if len(prompt) > model.cfg.max_seq_len:
        raise ValidationError(f"prompt of {len(prompt)} tokens exceeds max_seq_len {model.cfg.max_seq_len}")
    check_tokens(model, np.array([prompt]))
    return prompt


def _decode(model, head, prompt, cfg, step_fn) -> tuple[list[int], ComputeLedger]:
    tokens = _check_prompt(model, prompt)
    rng = np.random.default_rng(cfg.seed)
    ledger = ComputeLedger(model.cfg.n_layers)
    out: list[int] = []
    start = time.perf_counter()
    with ad.no_grad():
        for _ in range(cfg.max_new_tokens):
            if len(tokens) > model.cfg.max_seq_len:
                break
            logits, layers = step_fn(model, head, np.array([tokens]))
            ledger.add(layers, layers)
            nxt = _pick(logits, cfg, rng)
            out.append(nxt)
            tokens.append(nxt)
            if cfg.stop_at_eos and nxt == EOS:
                break
    ledger.wall_clock = time.perf_counter() - start
    return out, ledger


def generate(model: TransformerModel, head: ModHead | None, prompt, cfg: GenConfig | None = None):
    """Autoregressive decoding from ensemble logits (final logits when ``head`` is None)."""
    cfg = cfg or GenConfig()
    cfg.validate(head)
    if cfg.cache_mode == "propagate":
        return _cached_decode(model, head, prompt, cfg, early_exit=False)
    return _decode(model, head, prompt, cfg, _full_step)


def generate_early_exit(model: TransformerModel, head: ModHead, prompt, cfg: GenConfig | None = None):
    """Decode computing only up to the deepest route selected by Top-K at each step."""
    cfg = cfg or GenConfig(early_exit=True)
    cfg = GenConfig(**{**asdict(cfg), "early_exit": True})
    cfg.validate(head)
    if cfg.cache_mode == "propagate":
        return _cached_decode(model, head, prompt, cfg, early_exit=True)
    return _decode(model, head, prompt, cfg, _early_exit_step)


# key/value cached decoding (cache_mode="propagate")


class _KVCache:
    def __init__(self, n_layers: int):
        self.k = [None] * n_layers
        self.v = [None] * n_layers

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        if self.k[layer] is None:
            self.k[layer], self.v[layer] = k, v
        else:
            self.k[layer] = np.concatenate([self.k[layer], k], axis=2)
            self.v[layer] = np.concatenate([self.v[layer], v], axis=2)


def _ln(x, gamma, beta, eps):
    return ad.layer_norm(Tensor(x), gamma, beta, eps).data


def _proj(model, layer, proj, x):
    return project(model, layer, proj, Tensor(x)).data


def _kv(model, layer, a):
    b, t, d = a.shape
    h = model.cfg.n_heads
    split = lambda z: z.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)
    return split(_proj(model, layer, "attn_k", a)), split(_proj(model, layer, "attn_v", a)), split


def _cached_block(model, layer, x, cache):
    """One block for new positions ``x`` (batch x t_new x d) against the cache."""
    p = model.params
    pre = f"blocks.{layer}."
    eps = model.cfg.norm_eps
    b, t, d = x.shape
    h = model.cfg.n_heads
    a = _ln(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], eps)
    k_new, v_new, split = _kv(model, layer, a)
    cache.append(layer, k_new, v_new)
    q = split(_proj(model, layer, "attn_q", a))
    keys, vals = cache.k[layer], cache.v[layer]
    scores = Tensor(q @ np.swapaxes(keys, -1, -2) * x.dtype.type(1.0 / np.sqrt(d // h)))
    att = ad.softmax(ad.causal_mask(scores), axis=-1).data
    ctx = (att @ vals).transpose(0, 2, 1, 3).reshape(b, t, d)
    x = x + _proj(model, layer, "attn_o", ctx)
    m = _ln(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], eps)
    m = ad.gelu(Tensor(_proj(model, layer, "mlp_in", m))).data
    return x + _proj(model, layer, "mlp_out", m)


def _fill_skipped(model, layer, h, cache):
    p = model.params
    pre = f"blocks.{layer}."
    a = _ln(h, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], model.cfg.norm_eps)
    k_new, v_new, _ = _kv(model, layer, a)
    cache.append(layer, k_new, v_new)


def _cached_decode(model, head, prompt, cfg, early_exit: bool):
    tokens = _check_prompt(model, prompt)
    n = model.cfg.n_layers
    rng = np.random.default_rng(cfg.seed)
    ledger = ComputeLedger(n)
    cache = _KVCache(n)
    out: list[int] = []
    start = time.perf_counter()
    new = np.array([tokens])
    pos0 = 0
    with ad.no_grad():
        for _ in range(cfg.max_new_tokens):
            if pos0 + new.shape[1] > model.cfg.max_seq_len:
                break
            t = new.shape[1]
            x = (ad.embedding(model.params["tok_emb"], new).data
                 + model.params["pos_emb"].data[pos0:pos0 + t])
            states = {0: x}
            limit = head.router_layer if head is not None else n
            for j in range(1, limit + 1):
                x = _cached_block(model, j - 1, x, cache)
                states[j] = x
            if head is None:
                trace = _Trace(states, n)
                logits = final_logits(model, trace).data[0, -1]
                layers = n
            else:
                scores = route_scores(head, Tensor(x[:, -1:]))
                top_k = head.cfg.top_k
                if early_exit:
                    selected = sorted(int(i) for i in route_tiebreak(scores.data[0, -1], top_k))
                else:
                    selected = list(range(head.k))
                stop = head.route_layer_map[selected[-1]]
                for j in range(limit + 1, stop + 1):
                    x = _cached_block(model, j - 1, x, cache)
                    states[j] = x
                for j in range(stop + 1, n + 1):
                    _fill_skipped(model, j - 1, x, cache)
                trace = _Trace({j: s[:, -1:] for j, s in states.items()}, n)
                weights = _weights_from_scores(head, scores)
                weights = ad.index(weights, (Ellipsis, selected))
                route = [exit_logits(model, head, trace, i) for i in selected]
                logits = combine(route, weights).data[0, -1]
                layers = stop
            ledger.add(layers, layers)
            nxt = _pick(logits, cfg, rng)
            out.append(nxt)
            pos0 += t
            new = np.array([[nxt]])
            if cfg.stop_at_eos and nxt == EOS:
                break
    ledger.wall_clock = time.perf_counter() - start
    return out, ledger


class _Trace:
    def __init__(self, states: dict, n: int):
        self.hiddens = [Tensor(states[j]) if j in states else None for j in range(n + 1)]

    def __getitem__(self, j):
        h = self.hiddens[j]
        if h is None:
            raise ValidationError(f"hidden state H_{j} was not computed")
        return h
