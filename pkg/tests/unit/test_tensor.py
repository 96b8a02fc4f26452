import unittest

import numpy as np

from src.errors import GradCheckError, ShapeMismatchError
from src.gradcheck import check_or_raise, run_gradcheck
from src.tensor import (Tape, Tensor, batch_norm, concat, conv2d, conv3d, conv_nd, conv_transpose2d, conv_transpose_nd,
                        depthwise_conv2d, gelu, grad_check, layer_norm, no_grad, sigmoid)


def _naive_conv2d(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, [(0, 0), (0, 0), (padding, padding), (padding, padding)])
    oh, ow = (h + 2 * padding - k) // stride + 1, (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for j in range(o):
            for y in range(oh):
                for x_ in range(ow):
                    for ci in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                out[i, j, y, x_] += w[j, ci, ky, kx] * xp[i, ci, y * stride + ky, x_ * stride + kx]
            out[i, j] += b[j]
    return out


### Unit Test Class for the Autodiff Core ###

class TestTensorOps(unittest.TestCase):
    """
    Unit tests for forward values of the convolution, normalization and activation ops.
    """

    def setUp(self):
        self.rng = np.random.default_rng(0)

    ### Convolutions ###

    def test_conv2d_1x1_identity(self):
        """A 1x1 kernel of weight 1 and zero bias is the identity."""
        x = self.rng.normal(size=(1, 1, 4, 4))
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data, x)

    def test_conv2d_matches_loop_oracle(self):
        """3x3 conv with padding 1 equals the nested-loop summation."""
        x = self.rng.normal(size=(1, 2, 4, 4))
        w = self.rng.normal(size=(3, 2, 3, 3))
        b = self.rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1)
        np.testing.assert_allclose(out.data, _naive_conv2d(x, w, b, 1, 1), atol=1e-12)

    def test_conv2d_stride2_shape(self):
        """k=3, s=2, p=1 halves an 8x8 map."""
        out = conv2d(Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((2, 1, 3, 3))), stride=2, padding=1)
        self.assertEqual(out.shape, (1, 2, 4, 4))
        np.testing.assert_allclose(out.data, _naive_conv2d(np.zeros((1, 1, 8, 8)), np.zeros((2, 1, 3, 3)), np.zeros(2), 2, 1))

    def test_conv3d_identity_kernel_and_bias(self):
        """A 1x1x1 identity kernel passes input through; zero input gives the broadcast bias."""
        x = self.rng.normal(size=(1, 2, 3, 3, 3))
        w = np.zeros((2, 2, 1, 1, 1))
        w[0, 0], w[1, 1] = 1.0, 1.0
        np.testing.assert_allclose(conv3d(Tensor(x), Tensor(w)).data, x)
        out = conv3d(Tensor(np.zeros_like(x)), Tensor(w), Tensor(np.array([0.5, -1.0])))
        np.testing.assert_allclose(out.data[0, 0], 0.5)
        np.testing.assert_allclose(out.data[0, 1], -1.0)

    def test_conv_channel_mismatch(self):
        """Mismatched channels are a shape_mismatch error."""
        with self.assertRaises(ShapeMismatchError):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))

    def test_conv_transpose_identity_and_shape(self):
        """Stride-1 1x1 transpose with weight 1 is the identity; stride 2 doubles 4x4 to 8x8."""
        x = self.rng.normal(size=(1, 1, 4, 4))
        np.testing.assert_allclose(conv_transpose2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=1).data, x)
        self.assertEqual(conv_transpose2d(Tensor(x), Tensor(np.ones((1, 3, 2, 2))), stride=2).shape, (1, 3, 8, 8))

    def test_conv_transpose_is_adjoint_of_conv(self):
        """<conv(x), y> equals <x, conv_transpose(y)> with the same weights."""
        x = self.rng.normal(size=(2, 3, 7, 7))
        w = self.rng.normal(size=(4, 3, 3, 3))
        y = self.rng.normal(size=(2, 4, 4, 4))
        lhs = np.sum(conv_nd(Tensor(x), Tensor(w), stride=2, padding=1).data * y)
        rhs = np.sum(x * conv_transpose_nd(Tensor(y), Tensor(w), stride=2, padding=1).data)
        self.assertAlmostEqual(lhs, rhs, places=9)

    def test_depthwise_delta_kernel_identity(self):
        """A centered delta kernel is the identity."""
        x = self.rng.normal(size=(1, 2, 6, 6))
        w = np.zeros((2, 1, 7, 7))
        w[:, 0, 3, 3] = 1.0
        np.testing.assert_allclose(depthwise_conv2d(Tensor(x), Tensor(w)).data, x)

    def test_depthwise_matches_per_channel_conv(self):
        """Each channel equals a single-channel conv with its own filter."""
        x = self.rng.normal(size=(1, 2, 6, 6))
        w = self.rng.normal(size=(2, 1, 7, 7))
        out = depthwise_conv2d(Tensor(x), Tensor(w)).data
        for c in range(2):
            single = conv2d(Tensor(x[:, c:c + 1]), Tensor(w[c:c + 1]), padding=3).data
            np.testing.assert_allclose(out[:, c:c + 1], single, atol=1e-12)

    ### Normalization and activations ###

    def test_batch_norm_constant_input_gives_shift(self):
        """Constant input normalizes to zero, leaving beta."""
        beta = np.array([0.3, -0.7])
        out, _, _ = batch_norm(Tensor(np.full((2, 2, 3, 3), 4.0)), Tensor(np.ones(2)), Tensor(beta))
        np.testing.assert_allclose(out.data[:, 0], 0.3)
        np.testing.assert_allclose(out.data[:, 1], -0.7)

    def test_batch_norm_unit_variance(self):
        """With gamma 1, beta 0 each channel has mean 0 and variance 1 (up to eps)."""
        x = self.rng.normal(3.0, 2.0, size=(4, 3, 5, 5))
        out, _, _ = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-5)

    def test_layer_norm_per_site(self):
        """Layer norm standardizes the channel vector at every site."""
        x = self.rng.normal(size=(1, 6, 3, 3))
        out = layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-3)

    def test_gelu_reference_values(self):
        """Exact GELU: gelu(1) = Phi(1), gelu(0) = 0."""
        out = gelu(Tensor(np.array([0.0, 1.0, -1.0]))).data
        np.testing.assert_allclose(out, [0.0, 0.8413447460685429, -0.15865525393145707], atol=1e-12)

    def test_concat_shape_mismatch(self):
        """Concatenating incompatible shapes is a shape_mismatch error."""
        with self.assertRaises(ShapeMismatchError):
            concat([Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 2, 4)))], axis=1)


### Unit Test Class for Reverse-Mode Gradients ###

class TestTape(unittest.TestCase):
    """
    Unit tests for the tape: accumulation, no_grad and finite-difference agreement.
    """

    def test_reused_input_accumulates(self):
        """x * x records two uses of x and gives 2x."""
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        with Tape() as tape:
            y = (x * x).sum()
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [3.0, -4.0])

    def test_broadcast_gradient_is_reduced(self):
        """A broadcast bias receives the summed gradient."""
        x = Tensor(np.ones((3, 2)))
        b = Tensor(np.zeros(2), requires_grad=True)
        with Tape() as tape:
            y = (x + b).sum()
        tape.backward(y)
        np.testing.assert_allclose(b.grad, [3.0, 3.0])

    def test_no_grad_records_nothing(self):
        """Ops inside no_grad are constants."""
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                y = x * 2.0
        self.assertEqual(len(tape.records), 0)
        self.assertFalse(y.requires_grad)

    def test_backward_without_tape_raises(self):
        """A tensor that never went through a tape cannot be differentiated."""
        with self.assertRaises(RuntimeError):
            Tensor(np.ones(2)).backward()

    def test_grad_check_linear_function(self):
        """A linear map is checked to machine precision."""
        a = np.random.default_rng(1).normal(size=5)
        err = grad_check(lambda t: t * a, Tensor(np.random.default_rng(2).normal(size=5)))
        self.assertLess(err, 1e-8)

    def test_grad_check_conv_gelu_norm_composition(self):
        """conv -> layer norm -> GELU passes under 1e-4."""
        rng = np.random.default_rng(3)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
        g = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
        b = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
        x = Tensor(rng.normal(size=(1, 2, 5, 5)))
        err = grad_check(lambda t: gelu(layer_norm(conv2d(t, w, padding=1), g, b)), x, params=[w, g, b])
        self.assertLess(err, 1e-4)

    def test_concat_of_slices_routes_gradient_back(self):
        """Splitting a tensor and concatenating the parts hands each element its own upstream gradient."""
        x = Tensor(np.random.default_rng(7).normal(size=(3, 5)), requires_grad=True)
        weights = np.arange(15.0).reshape(3, 5)
        with Tape() as tape:
            y = (concat([x[:, :2], x[:, 2:]], axis=1) * weights).sum()
        tape.backward(y)
        np.testing.assert_allclose(x.grad, weights)

    def test_overlapping_slices_accumulate(self):
        """An element read by two slices collects both gradients."""
        x = Tensor(np.zeros(4), requires_grad=True)
        with Tape() as tape:
            y = concat([x[:3], x[1:]]).sum()
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [1.0, 2.0, 2.0, 1.0])

    def test_sigmoid_symmetry(self):
        """sigmoid(x) + sigmoid(-x) is one, including far in the tails."""
        x = np.concatenate([np.random.default_rng(7).normal(scale=5.0, size=200), [-800.0, 0.0, 800.0]])
        total = sigmoid(Tensor(x)).data + sigmoid(Tensor(-x)).data
        np.testing.assert_allclose(total, np.ones_like(x), atol=1e-12)

    def test_named_cases_pass(self):
        """Every primitive and layer case stays under the default tolerance."""
        for name in ("conv2d", "conv3d", "conv_transpose2d", "conv_transpose3d", "depthwise",
                     "batchnorm", "layernorm", "activations", "bev_project", "losses"):
            with self.subTest(case=name):
                self.assertLess(run_gradcheck(name, seed=0, max_coords=32), 1e-4)

    def test_check_or_raise_with_zero_tolerance(self):
        """A zero tolerance can never pass."""
        with self.assertRaises(GradCheckError):
            check_or_raise("activations", tol=0.0)


if __name__ == '__main__':
    unittest.main()
