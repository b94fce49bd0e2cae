"""Property-based checks of the documented invariants."""

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from modtune import autodiff as ad
from modtune.analytics import route_stats, smooth, sparsity
from modtune.checkpoint import decode_tensors, encode_tensors
from modtune.inference import ComputeLedger
from modtune.mod_head import masked_route_softmax, route_tiebreak, topk_keep_mask
from modtune.objectives import distill_loss

from conftest import fd_grad, rel_err

T = ad.Tensor
finite = st.floats(-30, 30, allow_nan=False, width=64)


def score_rows(max_k=6):
    return st.integers(1, max_k).flatmap(
        lambda k: arrays(np.float64, st.tuples(st.integers(1, 5), st.just(k)), elements=finite))


def prob_rows(draw, n, v):
    raw = draw(arrays(np.float64, (n, v), elements=st.floats(0, 1, allow_nan=False)))
    raw = raw + 1e-3
    return raw / raw.sum(-1, keepdims=True)


@given(score_rows(), st.floats(-50, 50))
def test_softmax_normalised_and_shift_invariant(x, c):
    p = ad.softmax(T(x, dtype=np.float64)).data
    np.testing.assert_allclose(p.sum(-1), 1, atol=1e-6)
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(ad.softmax(T(x + c, dtype=np.float64)).data, p, atol=1e-9)


@st.composite
def prob_pairs(draw):
    n, v = draw(st.integers(1, 4)), draw(st.integers(2, 8))
    return prob_rows(draw, n, v), prob_rows(draw, n, v)


@given(prob_pairs())
def test_kl_gibbs(pq):
    p, q = pq
    assert ad.kl_div(T(p, dtype=np.float64), T(q, dtype=np.float64)).item() >= -1e-12
    assert abs(ad.kl_div(T(p, dtype=np.float64), T(p, dtype=np.float64)).item()) <= 1e-9


@given(st.lists(prob_pairs(), min_size=1, max_size=3))
def test_distill_nonnegative(pairs):
    shape = pairs[0][0].shape
    probs = [T(p, dtype=np.float64) for p, _ in pairs if p.shape == shape]
    assert distill_loss(probs).item() >= -1e-9


@st.composite
def scores_and_k(draw):
    x = draw(score_rows())
    return x, draw(st.integers(1, x.shape[-1]))


@given(scores_and_k(), st.integers(-160, 160))
def test_topk_row_properties(xk, c):
    x, top_k = xk
    # dyadic grid: shifts are exact in floating point, so ties survive them
    x, c = np.round(x * 8) / 8, c / 8
    w = masked_route_softmax(T(x, dtype=np.float64), top_k).data
    np.testing.assert_allclose(w.sum(-1), 1, atol=1e-6)
    assert np.all(w >= 0)
    assert np.all(topk_keep_mask(x, top_k).sum(-1) == top_k)
    assert np.all(w[~topk_keep_mask(x, top_k)] == 0)
    # shifting a token's scores never changes which routes are kept
    np.testing.assert_array_equal(topk_keep_mask(x + c, top_k), topk_keep_mask(x, top_k))
    if top_k == x.shape[-1]:
        assert w.tobytes() == ad.softmax(T(x, dtype=np.float64)).data.tobytes()


@given(scores_and_k())
def test_tiebreak_prefers_deeper(xk):
    x, top_k = xk
    x = np.round(x)  # force ties
    for row in x:
        chosen = set(route_tiebreak(row, top_k).tolist())
        for i in chosen:
            for j in range(len(row)):
                if j not in chosen:
                    assert row[i] > row[j] or (row[i] == row[j] and i > j)


@given(arrays(np.float64, st.integers(1, 20), elements=finite), st.integers(1, 7))
def test_smooth_properties(x, window):
    y = smooth(x, window)
    assert y.shape == x.shape
    assert np.all(y >= x.min() - 1e-9) and np.all(y <= x.max() + 1e-9)
    np.testing.assert_allclose(smooth(np.full_like(x, 3.25), window), 3.25)


@given(st.integers(1, 5).flatmap(lambda k: arrays(np.float64, (12, k),
                                                 elements=st.floats(0, 1, allow_nan=False))),
       st.floats(1e-8, 0.5))
def test_sparsity_and_stats_oracles(w, eps):
    s = sparsity(w, eps)
    for i in range(w.shape[1]):
        assert s[i] == sum(1 for v in w[:, i] if v < eps) / len(w)
    mu, var = route_stats(w)
    for i in range(w.shape[1]):
        col = [float(v) for v in w[:, i]]
        m = sum(col) / len(col)
        assert np.isclose(mu[i], m, rtol=0, atol=1e-12)
        assert np.isclose(var[i], sum((v - m) ** 2 for v in col) / len(col), rtol=0, atol=1e-12)
    assert np.all((0 <= s) & (s <= 1)) and np.all(var >= 0)


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(1, 5)), min_size=1, max_size=30), st.integers(6, 10))
def test_ledger_ratio(steps, n):
    led = ComputeLedger(n)
    for deepest, k in steps:
        k = min(k, n)
        deepest = min(deepest, k - 1)
        led.add(n - k + deepest + 1, n - k + deepest + 1)
    assert led.acceleration_ratio >= 1.0
    assert led.acceleration_ratio == n * len(steps) / sum(led.layers_computed)


names = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FF), min_size=1, max_size=12)
tensor_arrays = st.sampled_from([np.float32, np.float64]).flatmap(
    lambda dt: arrays(dt, st.lists(st.integers(1, 4), max_size=3).map(tuple),
                      elements=st.floats(-1e6, 1e6, allow_nan=False, width=32)))


@given(st.dictionaries(names, tensor_arrays, max_size=5))
def test_checkpoint_roundtrip(entries):
    out = decode_tensors(encode_tensors(entries.items()))
    assert list(out) == list(entries)
    for k, v in entries.items():
        assert out[k].dtype == v.dtype and out[k].shape == v.shape and out[k].tobytes() == v.tobytes()


OPS = {
    "mul": lambda a, b: ad.sum_(ad.mul(a, b)),
    "softmax": lambda a, b: ad.sum_(ad.mul(ad.softmax(a), b)),
    "log_softmax": lambda a, b: ad.sum_(ad.mul(ad.log_softmax(a), b)),
    "gelu": lambda a, b: ad.sum_(ad.mul(ad.gelu(a), b)),
    "exp": lambda a, b: ad.sum_(ad.mul(ad.exp(ad.scale(a, 0.3)), b)),
    "matmul": lambda a, b: ad.sum_(ad.mul(ad.matmul(a, ad.transpose(b)), ad.matmul(a, ad.transpose(b)))),
    "layer_norm": lambda a, b: ad.sum_(ad.mul(ad.layer_norm(a, T(np.ones(a.shape[-1])), T(np.zeros(a.shape[-1]))), b)),
}


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(sorted(OPS)), st.integers(0, 2**32 - 1))
def test_op_gradients_random_instances(op, seed):
    rng = np.random.default_rng(seed)
    a = T(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    b = T(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    with ad.Tape():
        loss = OPS[op](a, b)
    ad.backward(loss)
    for t in (a, b):
        def value():
            with ad.no_grad():
                return OPS[op](a, b).item()
        assert rel_err(t.grad, fd_grad(value, t.data)) < 1e-4
