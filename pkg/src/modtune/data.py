"""Byte-level tokenizer, corpora and synthetic tasks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259
KINDS = ("text_corpus", "synth_copy", "synth_addition")


def encode(text: str | bytes) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def decode(ids) -> str:
    """Bytes back to text; special tokens are dropped."""
    return bytes(int(i) for i in ids if int(i) < 256).decode("utf-8", errors="replace")


@dataclass
class DatasetSpec:
    kind: str = "synth_addition"
    path: str | None = None
    digits: int = 2
    n_samples: int = 2000
    copy_len: int = 6
    copy_alphabet: str = "abcdefghij"
    seq_len: int = 64
    train_frac: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"data.kind must be one of {KINDS}, got {self.kind!r}")
        if not 0 < self.train_frac < 1:
            raise ConfigError("data.train_frac must be in (0, 1)")
        if self.kind == "text_corpus" and not self.path:
            raise ConfigError("data.path is required for text_corpus")
        if self.digits < 1 or self.n_samples < 2 or self.seq_len < 1 or self.copy_len < 1:
            raise ConfigError("data.digits, data.n_samples, data.seq_len and data.copy_len must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenDataset:
    train: np.ndarray              # rows of token ids, PAD-filled
    val: np.ndarray
    val_prompts: list = field(default_factory=list)   # (prompt ids, answer ids) for exact-match eval

    @property
    def seq_len(self) -> int:
        return self.train.shape[1]


def pad_rows(seqs, width: int | None = None) -> np.ndarray:
    width = max(len(s) for s in seqs) if width is None else width
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def lm_batch(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inputs, next-token targets and the mask of non-pad targets."""
    rows = np.asarray(rows)
    targets = rows[:, 1:]
    return rows[:, :-1], targets, targets != PAD


def _split(n: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_train = min(max(int(round(n * frac)), 1), n - 1)
    return order[:n_train], order[n_train:]


def _task_dataset(pairs, train_frac, rng) -> TokenDataset:
    seqs = [[BOS] + p + a for p, a in pairs]
    rows = pad_rows(seqs)
    tr, va = _split(len(rows), train_frac, rng)
    prompts = [([BOS] + pairs[i][0], pairs[i][1]) for i in va]
    return TokenDataset(rows[tr], rows[va], prompts)


def addition_pairs(digits: int, n_samples: int, rng: np.random.Generator):
    """Distinct ``A+B=`` prompts with their answer digits plus EOS."""
    hi = 10 ** digits
    n = min(n_samples, hi * hi)
    codes = rng.choice(hi * hi, size=n, replace=False)
    out = []
    for c in codes:
        a, b = divmod(int(c), hi)
        out.append((encode(f"{a}+{b}="), encode(str(a + b)) + [EOS]))
    return out


def copy_pairs(length: int, alphabet: str, n_samples: int, rng: np.random.Generator):
    letters = np.array(list(alphabet))
    seen: set[str] = set()
    out = []
    limit = len(alphabet) ** length
    while len(out) < min(n_samples, limit):
        s = "".join(rng.choice(letters, size=length))
        if s in seen:
            continue
        seen.add(s)
        out.append((encode(s + "="), encode(s) + [EOS]))
    return out


def corpus_dataset(data: bytes, seq_len: int, train_frac: float,
                   rng: np.random.Generator) -> TokenDataset:
    if not data:
        raise ValidationError("corpus is empty")
    ids = list(data)
    chunks = [[BOS] + ids[i:i + seq_len] for i in range(0, len(ids), seq_len)]
    if len(chunks) < 2:
        raise ValidationError(f"corpus of {len(ids)} bytes gives fewer than 2 chunks of {seq_len}")
    rows = pad_rows(chunks, seq_len + 1)
    tr, va = _split(len(rows), train_frac, rng)
    return TokenDataset(rows[tr], rows[va])


def build_dataset(spec: DatasetSpec) -> TokenDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "text_corpus":
        try:
            data = Path(spec.path).read_bytes()
        except OSError as exc:
            raise ValidationError(f"cannot read corpus {spec.path}: {exc}") from exc
        return corpus_dataset(data, spec.seq_len, spec.train_frac, rng)
    if spec.kind == "synth_addition":
        pairs = addition_pairs(spec.digits, spec.n_samples, rng)
    else:
        pairs = copy_pairs(spec.copy_len, spec.copy_alphabet, spec.n_samples, rng)
    return _task_dataset(pairs, spec.train_frac, rng)
