"""Routing statistics: sparsity, per-route mean/variance, smoothing."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def _flat(weights, mask=None) -> np.ndarray:
    w = np.asarray(getattr(weights, "data", weights), dtype=np.float64)
    k = w.shape[-1]
    if mask is not None:
        w = w[np.asarray(mask, dtype=bool)]
    return w.reshape(-1, k)


def sparsity(weights, epsilon: float = 1e-5, mask=None) -> np.ndarray:
    """Per-route fraction of token weights strictly below ``epsilon``."""
    w = _flat(weights, mask)
    if len(w) == 0:
        return np.full(w.shape[-1], np.nan)
    return (w < epsilon).mean(axis=0)


def route_stats(weights, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-route mean and population variance over tokens."""
    w = _flat(weights, mask)
    if len(w) == 0:
        nan = np.full(w.shape[-1], np.nan)
        return nan, nan.copy()
    return w.mean(axis=0), w.var(axis=0)


def smooth(series, window: int = 3) -> np.ndarray:
    """Centred moving average; windows are truncated at the ends."""
    if window < 1:
        raise ValidationError("smoothing window must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    if window == 1:
        return x.copy()
    left, right = (window - 1) // 2, window // 2
    out = np.empty_like(x)
    for i in range(len(x)):
        out[i] = x[max(0, i - left): i + right + 1].mean()
    return out
