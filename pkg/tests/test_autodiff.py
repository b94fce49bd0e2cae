import math

import numpy as np
import pytest

from modtune import autodiff as ad
from modtune.errors import ShapeError, ValidationError

from conftest import fd_grad, grad_of, rel_err

T = ad.Tensor


def param(a):
    return T(np.asarray(a, dtype=np.float64), requires_grad=True)


def check_op(build, *arrays, tol=1e-4):
    ts = [param(a) for a in arrays]
    analytic = grad_of(lambda: build(*ts), *ts)
    for t, g in zip(ts, analytic):
        def value():
            with ad.no_grad():
                return build(*ts).item()
        num = fd_grad(value, t.data)
        assert rel_err(g, num) < tol


def test_default_precision_is_32_bit():
    assert T([1.0, 2.0]).dtype == np.float32
    with ad.precision(np.float64):
        assert T([1.0]).dtype == np.float64
    assert ad.get_default_dtype() == np.float32


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(T([[1, 0], [0, 1]]), T([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_inner_product(self):
        assert ad.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11]]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(0)
        check_op(lambda a, b: ad.sum_(ad.matmul(a, b)), rng.normal(size=(5, 4)), rng.normal(size=(4, 3)))

    def test_batched_weight_grad(self):
        rng = np.random.default_rng(1)
        check_op(lambda a, b: ad.sum_(ad.mul(ad.matmul(a, b), ad.matmul(a, b))),
                 rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(T([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)

    def test_ln2_row(self):
        out = ad.softmax(T(np.array([math.log(2), 0.0, 0.0]), dtype=np.float64)).data
        np.testing.assert_allclose(out, [0.5, 0.25, 0.25], atol=1e-12)

    def test_no_overflow(self):
        out = ad.softmax(T([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-7)

    def test_all_masked_row_rejected(self):
        with pytest.raises(ValidationError):
            ad.softmax(T([-np.inf, -np.inf]))

    def test_grad(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(3, 5))
        check_op(lambda x: ad.sum_(ad.mul(ad.softmax(x), T(w))), rng.normal(size=(3, 5)))


class TestLayerNorm:
    def test_constant_row(self):
        out = ad.layer_norm(T(np.full((1, 4), 3.0)), T(np.ones(4)), T(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_already_standard(self):
        with ad.precision(np.float64):
            out = ad.layer_norm(T([[1.0, -1.0]]), T(np.ones(2)), T(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-10)

    def test_zero_gamma_gives_beta(self):
        beta = np.array([0.5, -2.0, 1.0])
        out = ad.layer_norm(T(np.random.default_rng(0).normal(size=(4, 3))), T(np.zeros(3)), T(beta))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (4, 3)), atol=1e-7)

    def test_grad(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(2, 3, 6))
        check_op(lambda x, g, b: ad.sum_(ad.mul(ad.layer_norm(x, g, b), T(w))),
                 rng.normal(size=(2, 3, 6)), 1 + 0.1 * rng.normal(size=6), 0.1 * rng.normal(size=6))


class TestCrossEntropy:
    def test_uniform_256(self):
        ce = ad.cross_entropy(T(np.zeros((4, 256))), [0, 5, 9, 255])
        assert ce.item() == pytest.approx(math.log(256), rel=1e-6)

    def test_confident(self):
        logits = np.zeros((2, 5))
        logits[0, 1] = logits[1, 3] = 1e4
        assert ad.cross_entropy(T(logits), [1, 3]).item() == pytest.approx(0.0, abs=1e-6)

    def test_random_matches_direct_probability(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(3, 7))
        targets = [2, 0, 6]
        p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        expected = -np.mean([math.log(p[i, t]) for i, t in enumerate(targets)])
        got = ad.cross_entropy(T(logits, dtype=np.float64), targets).item()
        assert got == pytest.approx(expected, rel=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(T(np.zeros((1, 3))), [3])

    def test_mask_and_all_masked(self):
        logits = T(np.random.default_rng(5).normal(size=(2, 3, 4)), dtype=np.float64)
        targets = np.array([[0, 1, 2], [3, 0, 1]])
        mask = np.array([[1, 1, 0], [1, 0, 0]], bool)
        full = ad.cross_entropy(ad.index(logits, (np.array([0, 0, 1]), np.array([0, 1, 0]))), [0, 1, 3])
        assert ad.cross_entropy(logits, targets, mask).item() == pytest.approx(full.item(), rel=1e-12)
        with pytest.raises(ValidationError):
            ad.cross_entropy(logits, targets, np.zeros((2, 3), bool))

    def test_grad(self):
        rng = np.random.default_rng(6)
        check_op(lambda x: ad.cross_entropy(x, [1, 4, 0]), rng.normal(size=(3, 5)))


class TestKL:
    def test_identical(self):
        p = T([[0.2, 0.3, 0.5]], dtype=np.float64)
        assert abs(ad.kl_div(p, p).item()) <= 1e-9

    def test_two_point(self):
        got = ad.kl_div(T([[0.5, 0.5]], dtype=np.float64), T([[0.25, 0.75]], dtype=np.float64)).item()
        assert got == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-12)
        assert round(got, 4) == 0.1438

    def test_zero_p_terms_and_floor(self):
        got = ad.kl_div(T([[1.0, 0.0]], dtype=np.float64), T([[1.0, 0.0]], dtype=np.float64)).item()
        assert got == 0.0
        # q underflows to 0 where p > 0: the floor keeps the result finite
        big = ad.kl_div(T([[0.5, 0.5]], dtype=np.float64), T([[1.0, 0.0]], dtype=np.float64)).item()
        assert big == pytest.approx(0.5 * math.log(0.5) + 0.5 * math.log(0.5 / 1e-12), rel=1e-9)

    def test_unnormalised_rejected(self):
        with pytest.raises(ValidationError):
            ad.kl_div(T([[0.5, 0.6]]), T([[0.5, 0.5]]))

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            v = rng.integers(2, 9)
            p = rng.dirichlet(np.ones(v))[None]
            q = rng.dirichlet(np.ones(v))[None]
            assert ad.kl_div(T(p, dtype=np.float64), T(q, dtype=np.float64)).item() >= -1e-12

    def test_grad_through_softmax(self):
        rng = np.random.default_rng(8)
        check_op(lambda a, b: ad.kl_div(ad.softmax(a), ad.softmax(b)),
                 rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))


class TestBackward:
    def test_sum_gives_ones(self):
        x = param(np.random.default_rng(0).normal(size=(2, 3, 4)))
        (g,) = grad_of(lambda: ad.sum_(x), x)
        np.testing.assert_array_equal(g, np.ones((2, 3, 4)))

    def test_square(self):
        x = param([1.0, -2.0, 3.0])
        (g,) = grad_of(lambda: ad.sum_(x * x), x)
        np.testing.assert_array_equal(g, 2 * x.data)

    def test_non_scalar_rejected(self):
        x = param([1.0, 2.0])
        with ad.Tape():
            y = x * x
        with pytest.raises(ShapeError):
            ad.backward(y)

    def test_rerun_resets(self):
        x = param([1.0, 2.0])
        with ad.Tape():
            loss = ad.sum_(x * x)
        ad.backward(loss)
        ad.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_no_grad_records_nothing(self):
        x = param([1.0])
        with ad.Tape() as tape:
            with ad.no_grad():
                x * x
        assert tape.nodes == []


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda a, b: ad.sum_(ad.mul(ad.add(a, b), ad.add(a, b))), [(3, 4), (4,)]),
    ("sub", lambda a, b: ad.sum_(ad.mul(ad.sub(a, b), a)), [(3, 4), (3, 1)]),
    ("exp_log", lambda a: ad.sum_(ad.log(ad.add(ad.exp(a), T(1.0)))), [(2, 5)]),
    ("gelu", lambda a: ad.sum_(ad.mul(ad.gelu(a), a)), [(4, 3)]),
    ("mean", lambda a: ad.mean(ad.mul(a, a)), [(3, 3)]),
    ("transpose_reshape", lambda a: ad.sum_(ad.mul(ad.reshape(ad.transpose(a), (6,)), T(np.arange(6.0)))), [(2, 3)]),
    ("concat", lambda a, b: ad.sum_(ad.mul(ad.concat([a, b], axis=0), ad.concat([b, a], axis=0))), [(2, 3), (2, 3)]),
    ("stack", lambda a, b: ad.sum_(ad.mul(ad.stack([a, b], axis=-1), ad.stack([a, a], axis=-1))), [(2, 3), (2, 3)]),
    ("index", lambda a: ad.sum_(ad.mul(ad.index(a, (slice(None), [0, 2, 2])), T(np.ones((3, 3))))), [(3, 4)]),
    ("log_softmax", lambda a: ad.sum_(ad.mul(ad.log_softmax(a), T(np.linspace(0, 1, 4)))), [(3, 4)]),
    ("scale_neg", lambda a: ad.sum_(ad.mul(ad.neg(ad.scale(a, 3.0)), a)), [(5,)]),
])
def test_op_gradients(name, build, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    check_op(build, *[rng.normal(size=s) for s in shapes])


def test_embedding_scatter_add():
    w = param(np.random.default_rng(9).normal(size=(5, 3)))
    ids = np.array([[1, 1, 4]])
    (g,) = grad_of(lambda: ad.sum_(ad.embedding(w, ids)), w)
    np.testing.assert_array_equal(g[1], [2, 2, 2])
    np.testing.assert_array_equal(g[4], [1, 1, 1])
    np.testing.assert_array_equal(g[0], [0, 0, 0])


def test_causal_mask_blocks_future():
    s = ad.softmax(ad.causal_mask(T(np.zeros((3, 3)))))
    np.testing.assert_allclose(s.data, [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]], atol=1e-7)


def test_topk_indices_tie_break():
    assert sorted(ad.topk_indices(np.array([1.0, 1.0, 0.0]), 1).tolist()) == [1]
    assert sorted(ad.topk_indices(np.array([1.0, 1.0, 1.0]), 2).tolist()) == [1, 2]
    assert sorted(ad.topk_indices(np.array([0.2, 3.0, 1.0]), 2).tolist()) == [1, 2]
    assert ad.argmax(np.array([[0.0, 2.0, 1.0]])).tolist() == [1]


def test_determinism():
    rng = np.random.default_rng(10)
    a, b = rng.normal(size=(6, 5)), rng.normal(size=(5, 4))
    x = ad.softmax(ad.matmul(T(a), T(b))).data
    y = ad.softmax(ad.matmul(T(a), T(b))).data
    assert x.tobytes() == y.tobytes()
