import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superkernel.tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    concat,
    contract,
    conv2d_strided,
    cross_entropy,
    exp,
    gelu,
    index,
    layer_norm,
    log,
    mse,
    precision,
    softmax,
)

from conftest import gradcheck, numeric_grad, rel_err


def loop_contract(a, b, ia, ib, io):
    """Nested-loop oracle: enumerate every index assignment."""
    ext = {}
    for term, arr in ((ia, a), (ib, b)):
        ext.update(zip(term, arr.shape))
    letters = sorted(ext)
    out = np.zeros([ext[c] for c in io])
    for vals in itertools.product(*(range(ext[c]) for c in letters)):
        env = dict(zip(letters, vals))
        out[tuple(env[c] for c in io)] += a[tuple(env[c] for c in ia)] * b[tuple(env[c] for c in ib)]
    return out


def loop_conv(x, f, sh, sw):
    B, _, H, W = x.shape
    C, _, kh, kw = f.shape
    ho, wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    out = np.zeros((B, C, ho, wo))
    for b in range(B):
        for c in range(C):
            for i in range(ho):
                for j in range(wo):
                    for u in range(kh):
                        for v in range(kw):
                            out[b, c, i, j] += x[b, 0, i * sh + u, j * sw + v] * f[c, 0, u, v]
    return out


class TestContract:
    def test_identity(self):
        out = contract(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]), "ij,jk->ik")
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_dot(self):
        assert contract(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 2.0, 3.0]), "i,i->").item() == 14.0

    def test_batched_matches_loops(self, rng, f64):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
        out = contract(Tensor(a), Tensor(b), "bij,bjk->bik").data
        np.testing.assert_allclose(out, loop_contract(a, b, "bij", "bjk", "bik"), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize(
        "ia,ib,io",
        [("bsrij", "hrij", "bsh"), ("ij", "jk", "ki"), ("abc", "c", "ab"), ("ab", "cd", "abcd"), ("ijk", "jk", "")],
    )
    def test_general_specs_match_loops(self, rng, f64, ia, ib, io):
        ext = {c: int(rng.integers(1, 4)) for c in set(ia + ib)}
        a = rng.normal(size=[ext[c] for c in ia])
        b = rng.normal(size=[ext[c] for c in ib])
        out = contract(Tensor(a), Tensor(b), f"{ia},{ib}->{io}").data
        np.testing.assert_allclose(out, loop_contract(a, b, ia, ib, io), rtol=1e-12, atol=1e-12)

    def test_implicit_output(self, rng, f64):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
        np.testing.assert_allclose(contract(Tensor(a), Tensor(b), "ij,jk").data, a @ b)

    @pytest.mark.parametrize(
        "spec,shapes",
        [
            ("ij,jk->ik", ((2, 3), (4, 5))),  # extent mismatch
            ("ij,jk->iz", ((2, 3), (3, 5))),  # output index absent
            ("ij;jk->ik", ((2, 3), (3, 5))),  # malformed
            ("ij->ij", ((2, 3), (3, 5))),  # one operand
            ("ii,ik->k", ((2, 2), (2, 5))),  # repeated index in a term
            ("ijk,jk->i", ((2, 3), (3, 5))),  # rank mismatch
        ],
    )
    def test_errors(self, spec, shapes):
        with pytest.raises(ValueError):
            contract(Tensor(np.ones(shapes[0])), Tensor(np.ones(shapes[1])), spec)

    @settings(max_examples=30, deadline=None)
    @given(alpha=st.floats(-10, 10, allow_nan=False), seed=st.integers(0, 10_000))
    def test_bilinear(self, alpha, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(3, 4)), r.normal(size=(4, 2))
        with precision("f64"):
            lhs = contract(Tensor(alpha * a), Tensor(b), "ij,jk->ik").data
            rhs = alpha * contract(Tensor(a), Tensor(b), "ij,jk->ik").data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-12)

    @pytest.mark.parametrize("spec,sa,sb", [("bij,bjk->bik", (2, 3, 4), (2, 4, 5)), ("abc,c->ab", (2, 3, 4), (4,)), ("ijk,jk->", (2, 3, 2), (3, 2))])
    def test_gradient(self, rng, f64, spec, sa, sb):
        err = gradcheck(lambda a, b: (contract(a, b, spec) ** 2).sum(), rng.normal(size=sa), rng.normal(size=sb))
        assert err <= 1e-4

    def test_gradient_when_index_only_in_one_operand(self, rng, f64):
        # "k" is summed inside a alone
        err = gradcheck(lambda a, b: (contract(a, b, "ik,ij->j") ** 2).sum(), rng.normal(size=(3, 4)), rng.normal(size=(3, 2)))
        assert err <= 1e-4


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)

    def test_against_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        oracle = np.exp(x) / np.exp(x).sum()
        with precision("f64"):
            np.testing.assert_allclose(softmax(Tensor(x)).data, oracle, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=8),
        st.floats(-100, 100, allow_nan=False),
    )
    def test_shift_invariance_and_probability(self, xs, c):
        x = np.array(xs)
        with precision("f64"):
            y = softmax(Tensor(x)).data
            np.testing.assert_allclose(softmax(Tensor(x + c)).data, y, atol=1e-6)
        assert (y >= 0).all()
        assert abs(y.sum() - 1) <= 1e-6
        order = np.argsort(x, kind="stable")
        assert (np.diff(y[order]) >= -1e-12).all()

    def test_all_neg_inf_row_is_uniform(self, caplog):
        x = np.array([[0.0, 1.0], [-np.inf, -np.inf]])
        with caplog.at_level(logging.WARNING):
            y = softmax(Tensor(x)).data
        np.testing.assert_allclose(y[1], [0.5, 0.5])
        assert "entirely -inf" in caplog.text

    def test_empty_axis(self):
        with pytest.raises(ValueError):
            softmax(Tensor(np.zeros((2, 0))))

    def test_gradient(self, rng, f64):
        w = rng.normal(size=(3, 5))
        assert gradcheck(lambda x: (softmax(x, axis=-1) * Tensor(w)).sum(), rng.normal(size=(3, 5))) <= 1e-4


class TestLayerNorm:
    def test_constant_row(self):
        y = layer_norm(Tensor(np.full((1, 4), 3.0)), eps=1e-5).data
        np.testing.assert_array_equal(y, 0)

    def test_two_points(self, f64):
        y = layer_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-12).data
        np.testing.assert_allclose(y, [[-1.0, 1.0]], atol=1e-9)

    def test_against_scalar_loops(self, rng, f64):
        x = rng.normal(size=(4, 8)) * 3 + 1
        g, b = rng.normal(size=8), rng.normal(size=8)
        out = layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=1e-5).data
        oracle = np.zeros_like(x)
        for i in range(4):
            m = sum(x[i]) / 8
            v = sum((t - m) ** 2 for t in x[i]) / 8
            for j in range(8):
                oracle[i, j] = (x[i, j] - m) / (v + 1e-5) ** 0.5 * g[j] + b[j]
        np.testing.assert_allclose(out, oracle, atol=1e-12)

    def test_normalized_moments(self, rng):
        y = layer_norm(Tensor(rng.normal(size=(16, 32)) * 5 + 2), eps=1e-5).data.astype(np.float64)
        assert np.abs(y.mean(axis=-1)).max() <= 1e-6
        assert np.abs(y.var(axis=-1) - 1).max() <= 1e-4

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            layer_norm(Tensor(np.ones((2, 2))), eps=0.0)

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_gradient(self, rng, f64):
        w = rng.normal(size=(3, 6))
        err = gradcheck(
            lambda x, g, b: (layer_norm(x, g, b, 1e-5) * Tensor(w)).sum(),
            rng.normal(size=(3, 6)),
            rng.normal(size=6),
            rng.normal(size=6),
        )
        assert err <= 1e-4


class TestConv:
    def test_sum_pooling(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = conv2d_strided(Tensor(x), Tensor(np.ones((1, 1, 2, 2))), (2, 2)).data
        np.testing.assert_array_equal(out[0, 0], [[0 + 1 + 4 + 5, 2 + 3 + 6 + 7], [8 + 9 + 12 + 13, 10 + 11 + 14 + 15]])

    def test_identity_tap(self, rng):
        x = rng.normal(size=(1, 1, 5, 5)).astype(np.float32)
        f = np.zeros((1, 1, 2, 2), dtype=np.float32)
        f[0, 0, 0, 0] = 1
        out = conv2d_strided(Tensor(x), Tensor(f), (1, 1)).data
        np.testing.assert_array_equal(out[0, 0], x[0, 0, :4, :4])

    def test_matches_loops(self, rng, f64):
        x, f = rng.normal(size=(1, 1, 6, 6)), rng.normal(size=(1, 1, 2, 2))
        np.testing.assert_array_equal(conv2d_strided(Tensor(x), Tensor(f), (2, 2)).data, loop_conv(x, f, 2, 2))

    @settings(max_examples=25, deadline=None)
    @given(
        kh=st.integers(1, 3), kw=st.integers(1, 3), sh=st.integers(1, 3), sw=st.integers(1, 3),
        th=st.integers(0, 2), tw=st.integers(0, 2), c=st.integers(1, 2), seed=st.integers(0, 999),
    )
    def test_matches_loops_property(self, kh, kw, sh, sw, th, tw, c, seed):
        H, W = kh + th * sh, kw + tw * sw
        r = np.random.default_rng(seed)
        x, f = r.normal(size=(2, 1, H, W)), r.normal(size=(c, 1, kh, kw))
        with precision("f64"):
            out = conv2d_strided(Tensor(x), Tensor(f), (sh, sw)).data
        np.testing.assert_allclose(out, loop_conv(x, f, sh, sw), rtol=0, atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            conv2d_strided(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 2, 2))), (2, 2))
        with pytest.raises(ValueError):
            conv2d_strided(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), (1, 1))

    def test_gradient(self, rng, f64):
        err = gradcheck(
            lambda x, f: (conv2d_strided(x, f, (2, 1)) ** 2).sum(),
            rng.normal(size=(2, 1, 5, 4)),
            rng.normal(size=(2, 1, 3, 2)),
        )
        assert err <= 1e-4


class TestBackward:
    def test_sum(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        np.testing.assert_array_equal(tape.backward(loss)[x], np.ones((3, 4)))

    def test_quadratic(self, rng, f64):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum() * 0.5
        np.testing.assert_allclose(tape.backward(loss)[x], x.data)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_detached_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            pass
        with pytest.raises(ValueError):
            tape.backward((x * 2.0).sum())

    def test_no_graph_outside_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = (x * 2.0).sum()
        assert y.grad_id is None and not y.requires_grad

    @pytest.mark.parametrize(
        "fn,shape",
        [
            (lambda x: (exp(x) * 0.5).sum(), (3, 2)),
            (lambda x: log(x * x + 1.0).sum(), (4,)),
            (lambda x: (gelu(x) ** 2).sum(), (3, 3)),
            (lambda x: (x / (x * x + 2.0)).sum(), (5,)),
            (lambda x: (x.transpose(1, 0, 2).reshape(3, -1) ** 3).sum(), (2, 3, 2)),
            (lambda x: (index(x, (np.array([0, 0, 2]), slice(None))) ** 2).sum(), (3, 2)),
            (lambda x: (concat([x, x * 2.0], axis=1) ** 2).mean(), (2, 3)),
            (lambda x: (x @ x.T).sum(), (3, 4)),
            (lambda x: mse(x, np.ones((2, 3))), (2, 3)),
            (lambda x: cross_entropy(x, np.array([0, 2, 1])), (3, 4)),
            (lambda x: (x.mean(axis=0, keepdims=True) * x).sum(), (3, 2)),
        ],
    )
    def test_primitive_gradients(self, rng, f64, fn, shape):
        assert gradcheck(fn, rng.normal(size=shape)) <= 1e-4

    def test_broadcast_gradients(self, rng, f64):
        err = gradcheck(lambda a, b: ((a + b) * (a - b)).sum(), rng.normal(size=(3, 4)), rng.normal(size=(1, 4)))
        assert err <= 1e-4

    def test_f32_gradients_looser(self, rng):
        x = rng.normal(size=(3, 4)).astype(np.float32)
        leaf = Tensor(x, requires_grad=True)
        with Tape() as tape:
            loss = (softmax(leaf) * Tensor(np.arange(4, dtype=np.float32))).sum()
        g = tape.backward(loss)[leaf]
        with precision("f64"):
            x64 = x.astype(np.float64)
            w = np.arange(4.0)
            num = numeric_grad(lambda: float((softmax(Tensor(x64)).data * w).sum()), x64)
        assert rel_err(g, num) <= 1e-2


class TestFiniteness:
    @pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
    def test_overflow_raises(self):
        with pytest.raises(NonFiniteError):
            exp(Tensor(np.array([1000.0])))

    def test_non_finite_input_passes_through(self):
        y = Tensor(np.array([np.inf])) + Tensor(np.array([1.0]))
        assert np.isinf(y.data).all()


def test_precision_switch():
    assert Tensor([1.0]).dtype == np.float32
    with precision("f64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
