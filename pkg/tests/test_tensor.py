import numpy as np
import pytest

from sbssl.tensor import (
    GELU_FORM, Adam, ShapeError, Tensor, adam_step, concat, cross_entropy, finite_difference_grad, gelu,
    is_grad_enabled, layernorm, matmul, no_grad, relative_error, softmax_lastdim, stack,
)


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def check_grad(fn, params, tol=1e-6):
    for p in params:
        p.zero_grad()
    fn().backward()
    for p in params:
        numeric = finite_difference_grad(fn, p)
        assert relative_error(p.grad, numeric) < tol, p.shape


class TestMatmul:
    def test_identity(self, rng):
        b = rng.standard_normal((3, 4))
        assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(b)).data, b)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        assert out.data.tolist() == [[3.0], [7.0]]

    def test_gradient(self, rng):
        a, b = param(rng, 4, 5), param(rng, 5, 3)
        w = rng.standard_normal((4, 3))
        check_grad(lambda: (matmul(a, b) * w).sum(), [a, b])

    def test_batched_gradient(self, rng):
        a, b = param(rng, 2, 3, 4), param(rng, 2, 4, 5)
        w = rng.standard_normal((2, 3, 5))
        check_grad(lambda: (matmul(a, b) * w).sum(), [a, b])

    def test_folded_leading_axes(self, rng):
        a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
        w = rng.standard_normal((2, 3, 5))
        np.testing.assert_allclose(matmul(a, b).data, a.data @ b.data)
        check_grad(lambda: (matmul(a, b) * w).sum(), [a, b])

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_lastdim(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_large_values_stable(self):
        out = softmax_lastdim(Tensor([1e4, 1e4])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_rows_sum_to_one(self, rng):
        x = rng.standard_normal((7, 5, 11)) * 30
        np.testing.assert_allclose(softmax_lastdim(Tensor(x)).data.sum(-1), 1.0, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            softmax_lastdim(Tensor([0.0, np.inf]))
        with pytest.raises(FloatingPointError):
            softmax_lastdim(Tensor([np.nan, 1.0]))

    def test_gradient(self, rng):
        x = param(rng, 3, 4)
        w = rng.standard_normal((3, 4))
        check_grad(lambda: (softmax_lastdim(x) * w).sum(), [x])


class TestGelu:
    def test_form_is_documented(self):
        assert GELU_FORM == "tanh"

    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptote(self):
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6

    def test_reference_value(self):
        # tanh form at x = 1
        x = 1.0
        ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
        assert gelu(Tensor([x])).data[0] == pytest.approx(ref, abs=1e-15)

    def test_gradient_points(self):
        for v in (-2.0, -0.5, 0.3, 4.0):
            x = Tensor([v], requires_grad=True)
            check_grad(lambda: gelu(x).sum(), [x])


class TestLayernorm:
    def test_constant_row(self):
        out = layernorm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_two_values(self):
        out = layernorm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_gradient(self, rng):
        x, g, b = param(rng, 3, 5), param(rng, 5), param(rng, 5)
        w = rng.standard_normal((3, 5))
        check_grad(lambda: (layernorm(x, g, b) * w).sum(), [x, g, b])


class TestBackward:
    def test_square_sum(self, rng):
        w = param(rng, 3, 2)
        (w * w).sum().backward()
        np.testing.assert_allclose(w.grad, 2 * w.data)

    def test_disconnected_stays_zero(self, rng):
        w, unused = param(rng, 3), param(rng, 3)
        unused.zero_grad()
        (w * 2.0).sum().backward()
        assert not np.any(unused.grad)

    def test_accumulates(self, rng):
        w = param(rng, 4)
        (w * 3.0).sum().backward()
        (w * 3.0).sum().backward()
        np.testing.assert_allclose(w.grad, np.full(4, 6.0))

    def test_non_scalar_rejected(self, rng):
        w = param(rng, 3)
        with pytest.raises(ShapeError):
            (w * 2.0).backward()

    def test_diamond_graph(self, rng):
        # a feeds two branches that rejoin; contributions must sum
        a = param(rng, 3)
        b = a * 2.0
        c = a.exp()
        loss = (b * c).sum()
        loss.backward()
        np.testing.assert_allclose(a.grad, 2 * np.exp(a.data) + 2 * a.data * np.exp(a.data))

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones(2))

    def test_no_grad(self, rng):
        w = param(rng, 2)
        with no_grad():
            assert not is_grad_enabled()
            out = w * 2.0
        assert is_grad_enabled()
        assert not out.requires_grad

    def test_broadcast_gradients(self, rng):
        a, b = param(rng, 4, 3), param(rng, 3)
        w = rng.standard_normal((4, 3))
        check_grad(lambda: ((a + b) * b * w).sum(), [a, b])

    def test_shape_ops(self, rng):
        a = param(rng, 2, 3, 4)
        w = rng.standard_normal((3, 2, 4))
        check_grad(lambda: (a.transpose(1, 0, 2).reshape(3, 8).reshape(3, 2, 4) * w).sum(), [a])
        check_grad(lambda: (a.swapaxes(0, 2)[1:, :, 0] * 1.5).sum(), [a])
        check_grad(lambda: (a.mean(axis=1) * w[0, 0]).sum(), [a])
        check_grad(lambda: a.max(axis=2).sum(), [a])

    def test_stack_concat(self, rng):
        a, b = param(rng, 2, 3), param(rng, 2, 3)
        w = rng.standard_normal((2, 2, 3))
        check_grad(lambda: (stack([a, b]) * w).sum(), [a, b])
        check_grad(lambda: (concat([a, b], axis=1) * w.reshape(2, 6)).sum(), [a, b])

    def test_getitem_repeated_index(self, rng):
        a = param(rng, 4)
        a[np.array([0, 0, 2])].sum().backward()
        np.testing.assert_array_equal(a.grad, [2.0, 0.0, 1.0, 0.0])

    def test_determinism(self, rng):
        seed_data = rng.standard_normal((5, 5))

        def run():
            x = Tensor(seed_data.copy(), requires_grad=True)
            loss = (gelu(matmul(x, x)) * softmax_lastdim(x)).sum()
            loss.backward()
            return loss.data.copy(), x.grad.copy()

        (l1, g1), (l2, g2) = run(), run()
        assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


class TestCrossEntropy:
    def test_hand_value(self):
        logits = Tensor([[0.0, 0.0], [2.0, 0.0]])
        loss = cross_entropy(logits, np.array([1, 0]))
        expected = (np.log(2) + np.log(1 + np.exp(-2))) / 2
        assert float(loss.data) == pytest.approx(expected, rel=1e-14)

    def test_gradient(self, rng):
        z = param(rng, 5, 2)
        check_grad(lambda: cross_entropy(z, np.array([0, 1, 1, 0, 1])), [z])


class TestAdam:
    def test_first_step_size(self):
        p = {"w": Tensor([0.0], requires_grad=True)}
        state = {"t": 0, "m": {"w": np.zeros(1)}, "v": {"w": np.zeros(1)}}
        adam_step(p, {"w": np.ones(1)}, state, lr=1e-3)
        assert p["w"].data[0] == pytest.approx(-1e-3, rel=1e-7)

    def test_pure_decay(self):
        p = {"w": Tensor([2.0], requires_grad=True)}
        state = {"t": 0, "m": {"w": np.zeros(1)}, "v": {"w": np.zeros(1)}}
        adam_step(p, {"w": np.zeros(1)}, state, lr=1e-2, weight_decay=0.4)
        assert p["w"].data[0] == pytest.approx(2.0 * (1 - 1e-2 * 0.4), abs=1e-15)

    def test_two_step_hand_trace(self):
        lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.5
        p = {"w": Tensor([1.0], requires_grad=True)}
        state = {"t": 0, "m": {"w": np.zeros(1)}, "v": {"w": np.zeros(1)}}
        w, m, v = 1.0, 0.0, 0.0
        for t, g in ((1, 0.5), (2, -2.0)):
            adam_step(p, {"w": np.array([g])}, state, lr, b1, b2, wd, eps)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w * (1 - lr * wd)
            w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            assert p["w"].data[0] == pytest.approx(w, abs=1e-15)

    def test_shape_mismatch(self):
        p = {"w": Tensor(np.zeros(2), requires_grad=True)}
        state = {"t": 0, "m": {"w": np.zeros(3)}, "v": {"w": np.zeros(3)}}
        with pytest.raises(ShapeError):
            adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)

    def test_optimizer_reduces_quadratic(self, rng):
        w = param(rng, 4)
        opt = Adam({"w": w}, lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            (w * w).sum().backward()
            opt.step()
        assert np.abs(w.data).max() < 1e-2


def test_relative_error_definition():
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([1.0, 2.0], [1.0, 2.2]) == pytest.approx(0.2 / 2.2)
    assert relative_error([0.0], [0.0]) == 0.0
