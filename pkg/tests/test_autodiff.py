import math

import numpy as np
import pytest

from mvinst import autodiff as ad
from mvinst.autodiff import GradCheckError, ShapeError, Tape, Tensor


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(Tensor(np.eye(2)), a)
        assert np.array_equal(out.data, a.data)

    def test_zero_row(self):
        out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[0.0], [5.0]]))
        assert np.array_equal(out.data, [[0.0], [0.0]])

    def test_hand_expanded_2x2(self):
        # [[1,2],[3,4]] @ [[5,6],[7,8]]: row-by-column by hand
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax_lastdim(Tensor([0.0, 0.0]))
        assert np.array_equal(out.data, [0.5, 0.5])

    def test_shift_invariance_constant(self):
        for c in (-3.0, 0.0, 17.5):
            out = ad.softmax_lastdim(Tensor([c, c, c]))
            assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)

    def test_log_odds(self):
        # direct exponentiation oracle: exp(ln 1)=1, exp(ln 3)=3 -> [1/4, 3/4]
        x = np.array([math.log(1.0), math.log(3.0)])
        oracle = np.exp(x) / np.exp(x).sum()
        out = ad.softmax_lastdim(Tensor(x))
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-15)
        assert np.allclose(out.data, oracle, atol=1e-15)

    def test_rows_sum_to_one_property(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
            x = rng.normal(scale=50.0, size=shape)
            out = ad.softmax_lastdim(Tensor(x)).data
            assert np.all(np.abs(out.sum(axis=-1) - 1.0) < 1e-12)

    def test_shift_invariance_property(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            x = rng.normal(scale=10.0, size=(3, 7))
            c = rng.normal(scale=100.0)
            a = ad.softmax_lastdim(Tensor(x)).data
            b = ad.softmax_lastdim(Tensor(x + c)).data
            assert np.all(np.abs(a - b) < 1e-12)

    def test_overflow_safe(self):
        out = ad.softmax_lastdim(Tensor([1000.0, 1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert abs(out.sum() - 1.0) < 1e-12


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        ad.backward(loss, tape)
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_sigmoid_at_zero(self):
        w = Tensor(0.0, requires_grad=True)
        with Tape() as tape:
            loss = ad.sigmoid(w)
        ad.backward(loss, tape)
        assert abs(float(w.grad) - 0.25) < 1e-15

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError, match="scalar"):
            ad.backward(y, tape)

    def test_two_layer_attention_toy_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        wq = Tensor(rng.normal(scale=0.5, size=(4, 4)), requires_grad=True)
        wk = Tensor(rng.normal(scale=0.5, size=(4, 4)), requires_grad=True)
        wv = Tensor(rng.normal(scale=0.5, size=(4, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 4)))

        def f():
            h = x
            for _ in range(2):
                scores = (h @ wq) @ ad.permute(h @ wk, (1, 0)) * 0.5
                h = h + ad.softmax_lastdim(scores) @ (h @ wv)
            return (h * h).mean()

        err = ad.grad_check(f, [wq, wk, wv], eps=1e-5)
        assert err < 1e-4

    def test_backward_deterministic(self):
        rng = np.random.default_rng(4)
        w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 6)))
        grads = []
        for _ in range(2):
            w.zero_grad()
            with Tape() as tape:
                loss = ad.gelu(x @ w).sum()
            ad.backward(loss, tape)
            grads.append(w.grad.copy())
        assert np.array_equal(grads[0], grads[1])

    def test_repeated_use_accumulates(self):
        w = Tensor(3.0, requires_grad=True)
        with Tape() as tape:
            loss = w * w  # d/dw = 2w
        ad.backward(loss, tape)
        assert float(w.grad) == 6.0


class TestGradCheck:
    def test_quadratic_is_exact(self):
        w = Tensor(3.0, requires_grad=True)
        err = ad.grad_check(lambda: w * w, [w], eps=1e-5)
        assert err < 1e-8

    def test_rejects_nondeterministic_function(self):
        w = Tensor(1.0, requires_grad=True)
        state = {"n": 0}

        def f():
            state["n"] += 1
            return w * float(state["n"])

        with pytest.raises(GradCheckError):
            ad.grad_check(f, [w])

    def test_rejects_bad_eps(self):
        w = Tensor(1.0, requires_grad=True)
        with pytest.raises(ValueError):
            ad.grad_check(lambda: w * w, [w], eps=0.0)


@pytest.mark.parametrize(
    "name,fn",
    [
        ("exp", lambda x: ad.exp(x * 0.3)),
        ("log", lambda x: ad.log(ad.sigmoid(x) + 0.5)),
        ("sqrt", lambda x: ad.sqrt(x * x + 1.0)),
        ("sigmoid", ad.sigmoid),
        ("gelu", ad.gelu),
        ("abs", lambda x: ad.absolute(x + 0.05)),
        ("huber", lambda x: ad.huber(x, 0.1)),
        ("softmax", ad.softmax_lastdim),
        ("log_softmax", ad.log_softmax_lastdim),
        ("mean_axis", lambda x: x.mean(axis=0)),
        ("sum_keepdims", lambda x: x.sum(axis=1, keepdims=True)),
        ("narrow", lambda x: ad.narrow(x, 1, 1, 3)),
        ("take_rows", lambda x: ad.take_rows(x, [2, 0, 2])),
        ("permute", lambda x: ad.permute(x, (1, 0))),
        ("reshape", lambda x: ad.reshape(x, (5, 4, 1))),
        ("div", lambda x: x / (ad.absolute(x) + 1.5)),
    ],
)
def test_primitive_gradients_match_finite_differences(name, fn):
    # random generic points, away from any clamping kinks by construction
    rng = np.random.default_rng(hash(name) % 2**32)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    err = ad.grad_check(lambda: (fn(x) * fn(x)).sum(), [x], eps=1e-5)
    assert err < 1e-4, f"{name}: {err}"


def test_layernorm_gradients():
    rng = np.random.default_rng(21)
    x = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    g = Tensor(rng.normal(size=8), requires_grad=True)
    b = Tensor(rng.normal(size=8), requires_grad=True)
    def f():
        y = ad.layer_norm(x, g, b)
        return (y * y).sum()

    err = ad.grad_check(f, [x, g, b])
    assert err < 1e-4


def test_concat_gradients():
    rng = np.random.default_rng(22)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    err = ad.grad_check(lambda: (ad.concat([a, b], axis=0) * ad.concat([b, a], axis=0)).sum(), [a, b])
    assert err < 1e-4


def test_no_grad_suppresses_recording():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        with ad.no_grad():
            y = x * x
        z = x + 1.0
    assert not y.requires_grad
    assert z.requires_grad
    assert len(tape) == 1


def test_tensor_flat_row_major_contract():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.shape == (2, 2)
    assert list(t.data.reshape(-1)) == [1.0, 2.0, 3.0, 4.0]
