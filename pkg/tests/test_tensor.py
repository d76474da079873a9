import threading
import unittest

import numpy as np

from src.core.tensor import (
    DimensionError,
    Tensor,
    UsageError,
    backward,
    concat,
    conv2d,
    grad_check,
    is_grad_enabled,
    layer_norm,
    matmul,
    no_grad,
    pad,
    roll,
    sigmoid,
    softmax_lastdim,
)


class TestTensorOps(unittest.TestCase):

    def test_matmul_identity(self):
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(matmul(eye, eye).data, np.eye(2))

    def test_matmul_permutation(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        p = Tensor([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(matmul(a, p).data, [[2.0, 1.0], [4.0, 3.0]])

    def test_matmul_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(DimensionError) as ctx:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        self.assertIn("(2, 3)", str(ctx.exception))

    def test_softmax_uniform_row(self):
        out = softmax_lastdim(Tensor(np.zeros((1, 3))))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_softmax_minus_inf_is_annihilated(self):
        out = softmax_lastdim(Tensor([[2.5, -np.inf]]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_softmax_nan_propagates(self):
        out = softmax_lastdim(Tensor([[np.nan, 1.0]]))
        self.assertTrue(np.isnan(out.data).any())

    def test_layer_norm_constant_row(self):
        x = Tensor(np.full((2, 4), 3.0))
        out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_layer_norm_zero_gamma_returns_beta(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        beta = np.array([0.5, -1.0, 2.0, 0.0])
        out = layer_norm(x, Tensor(np.zeros(4)), Tensor(beta))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (3, 4)))

    def test_layer_norm_rejects_non_positive_eps(self):
        with self.assertRaises(UsageError):
            layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)

    def test_sigmoid_saturation(self):
        self.assertAlmostEqual(sigmoid(Tensor([40.0])).item(), 1.0, delta=1e-15)
        self.assertTrue(np.isfinite(sigmoid(Tensor([-1000.0])).data).all())

    def test_conv2d_one_by_one_scales(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        out = conv2d(x, w, Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data.reshape(2, 2), [[2.0, 4.0], [6.0, 8.0]])

    def test_conv2d_three_by_three_sum(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, Tensor(np.zeros(1)), stride=1, pad=1)
        self.assertEqual(out.shape, (1, 1, 3, 3))
        self.assertEqual(out.data[0, 0, 1, 1], 9.0)
        self.assertEqual(out.data[0, 0, 0, 0], 4.0)

    def test_conv2d_non_integral_output(self):
        with self.assertRaises(DimensionError):
            conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)), stride=2)

    def test_conv2d_channel_mismatch(self):
        with self.assertRaises(DimensionError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 1, 1))), Tensor(np.zeros(1)))

    def test_concat_pad_roll_forward(self):
        a = Tensor(np.arange(4.0).reshape(2, 2))
        np.testing.assert_array_equal(concat([a, a], axis=-1).data, np.concatenate([a.data, a.data], axis=-1))
        np.testing.assert_array_equal(pad(a, ((0, 1), (0, 0))).data, np.pad(a.data, ((0, 1), (0, 0))))
        np.testing.assert_array_equal(roll(a, (1,), (0,)).data, np.roll(a.data, 1, axis=0))


class TestBackward(unittest.TestCase):

    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_root_is_usage_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(UsageError):
            backward(x * 2.0)

    def test_broadcast_gradient_is_reduced(self):
        x = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        (x + b).sum().backward()
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))
        self.assertEqual(x.grad.shape, (3, 4))

    def test_gradients_accumulate_until_zeroed(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_shared_subexpression(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        self.assertIsNone(y.creator)
        self.assertFalse(y.requires_grad)

    def test_no_grad_is_per_thread(self):
        a_entered, b_entered, a_left = threading.Event(), threading.Event(), threading.Event()
        seen = {}

        def first():
            with no_grad():
                a_entered.set()
                b_entered.wait(5)
                seen["first_inside"] = is_grad_enabled()
            seen["first_after"] = is_grad_enabled()
            a_left.set()

        def second():
            a_entered.wait(5)
            with no_grad():
                b_entered.set()
                a_left.wait(5)
            x = Tensor([2.0], requires_grad=True)
            (x * x).sum().backward()
            seen["second_grad"] = x.grad.tolist()

        threads = [threading.Thread(target=first), threading.Thread(target=second)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join(10)

        self.assertEqual(seen, {"first_inside": False, "first_after": True, "second_grad": [4.0]})
        self.assertTrue(is_grad_enabled())
        x = Tensor([1.0], requires_grad=True)
        (x * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, [3.0])


class TestGradCheck(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_grad_check_matches_on_analytic_examples(self):
        for f in (lambda t: t.sum(), lambda t: (t * t).sum()):
            x = Tensor(self.rng.normal(size=3))
            self.assertLess(grad_check(f, x), 1e-6)

    def test_softmax_and_layer_norm(self):
        gamma = Tensor(self.rng.normal(size=5))
        beta = Tensor(self.rng.normal(size=5))
        weights = self.rng.normal(size=(2, 5))
        x = Tensor(self.rng.normal(size=(2, 5)))
        self.assertLess(grad_check(lambda t: (softmax_lastdim(t) * weights).sum(), x), 1e-4)
        x = Tensor(self.rng.normal(size=(2, 5)))
        self.assertLess(grad_check(lambda t: (layer_norm(t, gamma, beta) * weights).sum(), x), 1e-4)

    def test_conv2d_weight_gradient(self):
        x = Tensor(self.rng.normal(size=(1, 2, 5, 5)))
        b = Tensor(np.zeros(3))
        weights = self.rng.normal(size=(1, 3, 3, 3))
        w = Tensor(self.rng.normal(size=(3, 2, 3, 3)))
        err = grad_check(lambda t: (conv2d(x, t, b, stride=2, pad=1) * weights).sum(), w)
        self.assertLess(err, 1e-4)

    def test_sampled_elements(self):
        x = Tensor(self.rng.normal(size=(20, 20)))
        err = grad_check(lambda t: (t * t).sum(), x, max_elements=10, rng=self.rng)
        self.assertLess(err, 1e-6)


if __name__ == "__main__":
    unittest.main()
