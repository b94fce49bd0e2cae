"""Pre-norm decoder-only transformer that keeps every layer's hidden state."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ValidationError

PROJECTIONS = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_in", "mlp_out")
INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int = 259
    d_model: int = 128
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256
    norm_eps: float = 1e-5
    tie_embeddings: bool = False
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        if self.max_seq_len < 2:
            raise ConfigError("model.max_seq_len must be at least 2")
        if self.norm_eps <= 0:
            raise ConfigError("model.norm_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def closed_form_param_count(cfg: ModelConfig) -> int:
    """Parameter count implied by the layer shapes.

    Per block: two norms (2d each), q/k/v/o projections (d*d + d each),
    MLP in (d*d_ff + d_ff) and out (d_ff*d + d). Outside the blocks: token
    embedding V*d, positions max_seq_len*d, final norm 2d, head bias V and,
    when untied, the head matrix d*V.
    """
    d, v, f = cfg.d_model, cfg.vocab_size, cfg.d_ff
    block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d)
    total = v * d + cfg.max_seq_len * d + cfg.n_layers * block + 2 * d + v
    if not cfg.tie_embeddings:
        total += d * v
    return total


@dataclass
class ForwardTrace:
    """Hidden states ``[H_0, ..., H_n]``; entries not retained are ``None``."""

    hiddens: list

    def __len__(self) -> int:
        return len(self.hiddens)

    def __getitem__(self, j: int) -> Tensor:
        h = self.hiddens[j]
        if h is None:
            raise ValidationError(f"hidden state H_{j} was not retained")
        return h

    @property
    def n_layers(self) -> int:
        return len(self.hiddens) - 1


@dataclass
class TransformerModel:
    cfg: ModelConfig
    params: dict[str, Tensor]
    adapters: dict = field(default_factory=dict)
    lora_cfg: object = None

    @property
    def dtype(self) -> np.dtype:
        return self.params["tok_emb"].dtype

    def astype(self, dtype) -> "TransformerModel":
        """Cast every parameter (adapters included) in place."""
        for t in self.parameters():
            t.data = t.data.astype(dtype)
        return self

    def parameters(self) -> list[Tensor]:
        return [t for _, t, _ in named_parameters(self)]

    def head_weight(self) -> Tensor:
        if self.cfg.tie_embeddings:
            return ad.transpose(self.params["tok_emb"])
        return self.params["head.weight"]


def _gauss(rng: np.random.Generator, shape, dtype, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(dtype), name=name)


def init_model(cfg: ModelConfig, dtype=np.float32) -> TransformerModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, v, f = cfg.d_model, cfg.vocab_size, cfg.d_ff
    p: dict[str, Tensor] = {}

    def zeros(name, shape):
        p[name] = Tensor(np.zeros(shape, dtype=dtype), name=name)

    def ones(name, shape):
        p[name] = Tensor(np.ones(shape, dtype=dtype), name=name)

    p["tok_emb"] = _gauss(rng, (v, d), dtype, "tok_emb")
    p["pos_emb"] = _gauss(rng, (cfg.max_seq_len, d), dtype, "pos_emb")
    shapes = {"attn_q": (d, d), "attn_k": (d, d), "attn_v": (d, d), "attn_o": (d, d),
              "mlp_in": (d, f), "mlp_out": (f, d)}
    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        ones(pre + "ln1.gamma", (d,))
        zeros(pre + "ln1.beta", (d,))
        for proj in ("attn_q", "attn_k", "attn_v", "attn_o"):
            p[pre + proj + ".weight"] = _gauss(rng, shapes[proj], dtype, pre + proj + ".weight")
            zeros(pre + proj + ".bias", (shapes[proj][1],))
        ones(pre + "ln2.gamma", (d,))
        zeros(pre + "ln2.beta", (d,))
        for proj in ("mlp_in", "mlp_out"):
            p[pre + proj + ".weight"] = _gauss(rng, shapes[proj], dtype, pre + proj + ".weight")
            zeros(pre + proj + ".bias", (shapes[proj][1],))
    ones("norm_p.gamma", (d,))
    zeros("norm_p.beta", (d,))
    if not cfg.tie_embeddings:
        p["head.weight"] = _gauss(rng, (d, v), dtype, "head.weight")
    zeros("head.bias", (v,))
    return TransformerModel(cfg=cfg, params=p)


def named_parameters(model: TransformerModel, head=None) -> list[tuple[str, Tensor, str]]:
    """``(name, tensor, group)`` for every parameter, each registered once.

    Groups: ``base``, ``lora``, ``mod_routing``, ``mod_norms``.
    """
    out = [(name, t, "base") for name, t in model.params.items()]
    for (layer, proj), ada in model.adapters.items():
        out.append((f"lora.{layer}.{proj}.A", ada.A, "lora"))
        out.append((f"lora.{layer}.{proj}.B", ada.B, "lora"))
    if head is not None:
        out.append(("mod.w_g", head.w_g, "mod_routing"))
        if head.norms is not None:
            for i, (g, b) in enumerate(head.norms):
                out.append((f"mod.norm.{i}.gamma", g, "mod_norms"))
                out.append((f"mod.norm.{i}.beta", b, "mod_norms"))
    return out


def count_params(model: TransformerModel, head=None, trainable_only: bool = False,
                 group: str | None = None) -> int:
    total = 0
    for _, t, g in named_parameters(model, head):
        if group is not None and g != group:
            continue
        if trainable_only and not t.requires_grad:
            continue
        total += t.data.size
    return total


def project(model: TransformerModel, layer: int, proj: str, x: Tensor) -> Tensor:
    """Affine projection ``x W + b`` plus the LoRA update when one is attached."""
    pre = f"blocks.{layer}.{proj}."
    y = ad.matmul(x, model.params[pre + "weight"]) + model.params[pre + "bias"]
    ada = model.adapters.get((layer, proj))
    if ada is not None:
        low = ad.matmul(ad.matmul(x, ad.transpose(ada.A)), ad.transpose(ada.B))
        y = y + ad.scale(low, ada.scaling)
    return y


def _attention(model: TransformerModel, layer: int, x: Tensor) -> Tensor:
    b, t, d = x.shape
    h = model.cfg.n_heads
    dh = d // h

    def heads(z):
        return ad.transpose(ad.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

    q = heads(project(model, layer, "attn_q", x))
    k = heads(project(model, layer, "attn_k", x))
    v = heads(project(model, layer, "attn_v", x))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
    att = ad.softmax(ad.causal_mask(scores), axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
    return project(model, layer, "attn_o", ctx)


def block(model: TransformerModel, layer: int, x: Tensor) -> Tensor:
    p = model.params
    pre = f"blocks.{layer}."
    eps = model.cfg.norm_eps
    a = ad.layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], eps)
    x = x + _attention(model, layer, a)
    m = ad.layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], eps)
    m = project(model, layer, "mlp_out", ad.gelu(project(model, layer, "mlp_in", m)))
    return x + m


def check_tokens(model: TransformerModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValidationError(f"tokens must be a batch x seq matrix, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValidationError("tokens must be integers")
    if tokens.shape[1] > model.cfg.max_seq_len:
        raise ValidationError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {model.cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.cfg.vocab_size):
        raise ValidationError(f"token id outside [0, {model.cfg.vocab_size})")
    return tokens


def forward(model: TransformerModel, tokens, upto: int | None = None,
            keep_from: int = 0) -> ForwardTrace:
    """Run layers ``1..upto`` (default all) and capture post-residual states.

    States with index below ``keep_from`` are dropped (``None``) to save memory;
    layers past ``upto`` are not computed and their slots are ``None`` too.
    """
    tokens = check_tokens(model, tokens)
    n = model.cfg.n_layers
    upto = n if upto is None else upto
    if not 0 <= upto <= n:
        raise ValidationError(f"upto={upto} outside [0, {n}]")
    t = tokens.shape[1]
    h = ad.embedding(model.params["tok_emb"], tokens) + ad.index(model.params["pos_emb"], slice(0, t))
    hiddens: list = [h if keep_from <= 0 else None]
    for j in range(1, upto + 1):
        h = block(model, j - 1, h)
        hiddens.append(h if j >= keep_from else None)
    hiddens.extend([None] * (n - upto))
    return ForwardTrace(hiddens)


def lm_head(model: TransformerModel, h: Tensor) -> Tensor:
    return ad.matmul(h, model.head_weight()) + model.params["head.bias"]


def pretrained_norm(model: TransformerModel, h: Tensor) -> Tensor:
    p = model.params
    return ad.layer_norm(h, p["norm_p.gamma"], p["norm_p.beta"], model.cfg.norm_eps)


def final_logits(model: TransformerModel, trace: ForwardTrace) -> Tensor:
    return lm_head(model, pretrained_norm(model, trace[model.cfg.n_layers]))
