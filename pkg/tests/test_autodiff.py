"""Gradient and forward checks for the autodiff core."""

import numpy as np
import pytest

from polsarcl.autodiff import Tensor, conv1d, conv2d, l2_normalize, maxpool1d, maxpool2d


def finite_difference(param: Tensor, index: int, f, step: float = 1e-6) -> float:
    old = param.data.flat[index]
    param.data.flat[index] = old + step
    up = f()
    param.data.flat[index] = old - step
    down = f()
    param.data.flat[index] = old
    return (up - down) / (2.0 * step)


def check_gradients(params, f, rng, samples=12, rtol=1e-5):
    """Compare analytic grads (already accumulated) against central FD."""
    for p in params:
        n = min(samples, p.size)
        for idx in rng.choice(p.size, size=n, replace=False):
            num = finite_difference(p, idx, f)
            ana = p.grad.flat[idx]
            assert ana == pytest.approx(num, rel=rtol, abs=1e-8)


class TestElementwise:
    def test_sum_of_squares_gradient(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        loss = (w * w).sum()
        loss.backward()
        np.testing.assert_allclose(w.grad, [2.0, 4.0])

    def test_detached_branch_gets_no_gradient(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        loss = (w.detach() * 3.0).sum() + (w * w).sum()
        loss.backward()
        np.testing.assert_allclose(w.grad, [2.0, 4.0])

    def test_broadcast_add_unbroadcasts_gradient(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        (a + b).sum().backward()
        assert a.grad.shape == (3, 4)
        np.testing.assert_allclose(b.grad, [3.0, 3.0, 3.0, 3.0])

    def test_mixed_dtype_rejected(self):
        a = Tensor(np.ones(3, dtype=np.float32))
        b = Tensor(np.ones(3, dtype=np.float64))
        with pytest.raises(TypeError):
            _ = a + b

    def test_backward_requires_scalar(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (a * 2.0).backward()

    def test_backward_visits_each_node_once(self):
        a = Tensor([2.0], requires_grad=True)
        b = a * 3.0
        loss = (b * b).sum()
        visits = loss.backward()
        # nodes with a backward closure: mul, mul, sum
        assert visits == 3
        np.testing.assert_allclose(a.grad, [36.0])

    def test_composite_gradcheck(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((4, 5)) + 2.5, requires_grad=True)

        def f():
            t = Tensor(x.data, requires_grad=True)
            return ((t.log() + t.exp() * 0.01).relu().pow(1.5)).mean().item()

        loss = ((x.log() + x.exp() * 0.01).relu().pow(1.5)).mean()
        loss.backward()
        check_gradients([x], f, rng)


class TestMatmul:
    def test_matmul_forward(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0], [6.0]])
        np.testing.assert_allclose((a @ b).data, [[17.0], [39.0]])

    def test_matmul_gradcheck(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def f():
            return float(((a.data @ b.data) ** 2).sum())

        loss = ((a @ b).pow(2.0)).sum()
        loss.backward()
        check_gradients([a, b], f, rng)


class TestConv:
    def test_scalar_conv_is_multiplication(self):
        x = Tensor(np.full((1, 1, 1, 1), 3.0))
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        out = conv2d(x, w, None, padding=0)
        assert out.item() == 6.0

    def test_delta_input_reads_out_kernel_window(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 1.0
        w = np.arange(9.0).reshape(1, 1, 3, 3)
        out = conv2d(Tensor(x), Tensor(w), None, padding=0)
        # cross-correlation with a centered delta reproduces the kernel center
        assert out.data.shape == (1, 1, 1, 1)
        assert out.item() == w[0, 0, 1, 1]

    def test_padded_output_size(self):
        x = Tensor(np.zeros((2, 9, 15, 15)))
        w = Tensor(np.zeros((4, 9, 3, 3)))
        out = conv2d(x, w, None, padding=2)
        assert out.shape == (2, 4, 17, 17)

    def test_conv2d_gradcheck(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)

        def f():
            out = conv2d(Tensor(x.data), Tensor(w.data), Tensor(b.data), padding=1)
            return (out.pow(2.0)).sum().item()

        (conv2d(x, w, b, padding=1).pow(2.0)).sum().backward()
        check_gradients([x, w, b], f, rng)

    def test_conv1d_gradcheck(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 2, 9)), requires_grad=True)
        w = Tensor(rng.standard_normal((5, 2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(5), requires_grad=True)

        def f():
            out = conv1d(Tensor(x.data), Tensor(w.data), Tensor(b.data), padding=2)
            return (out.pow(2.0)).sum().item()

        (conv1d(x, w, b, padding=2).pow(2.0)).sum().backward()
        check_gradients([x, w, b], f, rng)

    def test_conv_linearity_without_bias(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 3, 5, 5))
        w = Tensor(rng.standard_normal((2, 3, 3, 3)))
        out1 = conv2d(Tensor(3.7 * x), w, None, padding=1).data
        out2 = 3.7 * conv2d(Tensor(x), w, None, padding=1).data
        np.testing.assert_allclose(out1, out2, rtol=1e-12)


class TestPooling:
    def test_1d_example(self):
        x = Tensor(np.array([[[1.0, 3.0, 2.0, 0.0]]]))
        np.testing.assert_allclose(maxpool1d(x).data, [[[3.0, 2.0]]])

    def test_constant_input_stays_constant(self):
        x = Tensor(np.full((1, 2, 6, 6), 4.2))
        np.testing.assert_allclose(maxpool2d(x).data, np.full((1, 2, 3, 3), 4.2))

    def test_odd_trailing_elements_dropped(self):
        x = Tensor(np.zeros((1, 1, 17, 17)))
        assert maxpool2d(x).shape == (1, 1, 8, 8)

    def test_maxpool2d_gradcheck(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((2, 2, 6, 6)), requires_grad=True)

        def f():
            return (maxpool2d(Tensor(x.data)).pow(2.0)).sum().item()

        (maxpool2d(x).pow(2.0)).sum().backward()
        check_gradients([x], f, rng)

    def test_maxpool_routes_gradient_to_argmax(self):
        x = Tensor(np.array([[[1.0, 5.0, 2.0, 2.0]]]), requires_grad=True)
        maxpool1d(x).sum().backward()
        np.testing.assert_allclose(x.grad, [[[0.0, 1.0, 1.0, 0.0]]])


class TestL2Normalize:
    def test_three_four_five(self):
        v = l2_normalize(Tensor(np.array([[3.0, 4.0]])))
        np.testing.assert_allclose(v.data, [[0.6, 0.8]])

    def test_unit_vector_unchanged(self):
        v = np.array([[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(l2_normalize(Tensor(v)).data, v)

    def test_output_norm_is_one(self):
        rng = np.random.default_rng(6)
        v = l2_normalize(Tensor(rng.standard_normal((50, 8))))
        np.testing.assert_allclose(np.linalg.norm(v.data, axis=1), 1.0, atol=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((10, 4)))
        once = l2_normalize(x).data
        twice = l2_normalize(l2_normalize(x)).data
        np.testing.assert_allclose(once, twice, atol=1e-14)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            l2_normalize(Tensor(np.zeros((1, 3))))

    def test_gradcheck(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)

        def f():
            return (l2_normalize(Tensor(x.data)) * 0.5).pow(2.0).sum().item()

        ((l2_normalize(x) * 0.5).pow(2.0)).sum().backward()
        check_gradients([x], f, rng)
