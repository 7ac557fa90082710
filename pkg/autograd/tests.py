# ============================================================================
# 📌 AUTOGRAD TESTS: ops, tape and the finite-difference harness
# PURPOSE: Every model feature map and loss flows through these ops
# ============================================================================

import warnings

import numpy as np
from django.test import SimpleTestCase

from utils.exceptions import ConfigurationError, NonFiniteError, ShapeError

from . import ops
from .gradcheck import check_gradients, run_gradient_suite
from .tensor import Tape, Tensor, backward, no_grad, precision


def conv_oracle(x, kernel, bias, stride=1, padding=0):
    """Direct nested-loop cross-correlation."""
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, out_h, out_w))
    for b in range(n):
        for o in range(f):
            for i in range(out_h):
                for j in range(out_w):
                    total = bias[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                total += xp[b, ch, i * stride + u, j * stride + v] * kernel[o, ch, u, v]
                    out[b, o, i, j] = total
    return out


# ============================================================================
# TEST 1: FORWARD VALUES
# ============================================================================
class ConvolutionTests(SimpleTestCase):
    """
    🧮 PURPOSE: conv2d matches a nested-loop cross-correlation
    WHY: Every encoder and decoder stage is built on it
    """

    def test_identity_kernel_returns_input(self):
        x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.numpy(), x)

    def test_constant_field_sums_to_63(self):
        out = ops.conv2d(Tensor(np.full((1, 1, 4, 4), 7.0)), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        self.assertEqual(out.shape, (1, 1, 2, 2))
        np.testing.assert_allclose(out.numpy(), 63.0)

    def test_matches_nested_loop_oracle(self):
        """
        📌 TEST: conv2d against an explicit four-loop cross-correlation
        EXPECTED: Equal to float precision for three stride/padding settings
        """
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        for stride, padding in [(1, 0), (1, 1), (2, 1)]:
            out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, padding)
            np.testing.assert_allclose(out.numpy(), conv_oracle(x, k, b, stride, padding), atol=1e-4, rtol=1e-5)

    def test_rejects_bad_shapes(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with self.assertRaises(ShapeError):
            ops.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
        with self.assertRaises(ShapeError):
            ops.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros(1)))
        with self.assertRaises(ShapeError):
            ops.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(1)), stride=0)
        with self.assertRaises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros(1)))


class PoolingTests(SimpleTestCase):
    """
    🔽 PURPOSE: Max-pool and upsample forward values and gradient routing
    WHY: Mask coverage and skip connections depend on exact index maps
    """

    def test_maxpool_picks_window_max(self):
        out = ops.maxpool2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        self.assertEqual(out.item(), 4.0)

    def test_maxpool_tie_goes_to_first_cell(self):
        """
        📌 TEST: A 2x2 window with tied maxima
        EXPECTED: The gradient goes to the first cell in row-major order only
        """
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape():
            backward(ops.tensor_sum(ops.maxpool2(x)))
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_maxpool_matches_window_scan(self):
        x = np.random.default_rng(5).normal(size=(1, 2, 6, 6))
        out = ops.maxpool2(Tensor(x)).numpy()
        for c in range(2):
            for i in range(3):
                for j in range(3):
                    self.assertAlmostEqual(float(out[0, c, i, j]), float(x[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()), places=6)

    def test_maxpool_rejects_odd_extent(self):
        with self.assertRaises(ShapeError):
            ops.maxpool2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_upsample_repeats_cells(self):
        out = ops.upsample2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(out.numpy()[0, 0], expected)

    def test_upsample_gradient_sums_children(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 3)), requires_grad=True)
        with Tape():
            backward(ops.tensor_sum(ops.upsample2(x)))
        np.testing.assert_array_equal(x.grad, 4.0)

    def test_upsample_matches_index_map(self):
        x = np.random.default_rng(1).normal(size=(2, 1, 3, 4)).astype(np.float32)
        out = ops.upsample2(Tensor(x)).numpy()
        rows, cols = np.meshgrid(np.arange(6) // 2, np.arange(8) // 2, indexing="ij")
        np.testing.assert_array_equal(out, x[:, :, rows, cols])

    def test_global_avg_pool(self):
        np.testing.assert_allclose(ops.global_avg_pool(Tensor(np.full((1, 1, 3, 3), 2.5))).numpy(), [[2.5]])
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        self.assertAlmostEqual(ops.global_avg_pool(x).item(), 2.5)


class ElementwiseTests(SimpleTestCase):

    def test_sigmoid_and_relu(self):
        self.assertEqual(ops.sigmoid(Tensor([0.0])).item(), 0.5)
        np.testing.assert_array_equal(ops.relu(Tensor([-3.0, -0.5, 2.0])).numpy(), [0.0, 0.0, 2.0])
        # Large magnitudes stay finite.
        values = ops.sigmoid(Tensor([-80.0, 80.0])).numpy()
        self.assertTrue(np.all(np.isfinite(values)))

    def test_mask_broadcast_multiplication(self):
        a = Tensor(np.ones((1, 3, 2, 2)))
        mask = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
        out = ops.elementwise_mul(a, mask).numpy()
        for c in range(3):
            np.testing.assert_array_equal(out[0, c], [[1.0, 0.0], [0.0, 1.0]])

    def test_incompatible_shapes_raise(self):
        with self.assertRaises(ShapeError):
            ops.elementwise_add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))
        with self.assertRaises(ShapeError):
            ops.elementwise_mul(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 2, 2, 2))))
        with self.assertRaises(ShapeError):
            ops.concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 4, 4))))

    def test_non_finite_output_raises(self):
        with self.assertRaises(NonFiniteError) as caught:
            ops.scale(Tensor([1.0]), np.inf)
        self.assertEqual(caught.exception.tensor_name, "scale")

    def test_non_finite_output_names_the_parameter(self):
        """
        📌 TEST: An overflowing conv with a named weight
        EXPECTED: The error names the weight tensor, not the op
        """
        image = Tensor(np.full((1, 1, 4, 4), 1e30))
        weight = Tensor(np.full((1, 1, 3, 3), 1e30), requires_grad=True, name="theta.enc0.conv1.weight")
        with self.assertRaises(NonFiniteError) as caught:
            ops.conv2d(image, weight, Tensor(np.zeros(1)), padding=1)
        self.assertEqual(caught.exception.tensor_name, "theta.enc0.conv1.weight")


class CosineSimilarityTests(SimpleTestCase):

    def test_identity_and_orthogonality(self):
        u = Tensor(np.random.default_rng(2).normal(size=5))
        self.assertAlmostEqual(ops.cosine_similarity(u, u).item(), 1.0, places=6)
        self.assertEqual(ops.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item(), 0.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            u, v = rng.normal(size=6), rng.normal(size=6)
            alpha = float(rng.uniform(0.1, 10.0))
            with precision(np.float64):
                base = ops.cosine_similarity(Tensor(u), Tensor(v)).item()
                scaled = ops.cosine_similarity(Tensor(alpha * u), Tensor(v)).item()
            self.assertAlmostEqual(base, scaled, places=10)

    def test_output_is_clamped(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            u = rng.normal(size=8)
            value = ops.cosine_similarity(Tensor(u), Tensor(u * 3.0)).item()
            self.assertLessEqual(abs(value), 1.0)

    def test_zero_norm_warns(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            value = ops.cosine_similarity(Tensor(np.zeros(3)), Tensor([1.0, 0.0, 0.0])).item()
        self.assertEqual(value, 0.0)
        self.assertTrue(any(issubclass(w.category, ops.DegeneratePrototypeWarning) for w in caught))


# ============================================================================
# TEST 2: TAPE + BACKWARD
# ============================================================================
class BackwardTests(SimpleTestCase):
    """
    ⏪ PURPOSE: Tape recording, no_grad and backward preconditions
    WHY: A stale or leaking tape silently corrupts gradients
    """

    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        with Tape():
            backward(ops.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_gradient_is_two_x(self):
        x = Tensor(np.random.default_rng(1).normal(size=(5,)), requires_grad=True)
        with Tape():
            backward(ops.tensor_sum(x * x))
        np.testing.assert_allclose(x.grad, 2 * x.numpy(), rtol=1e-6)

    def test_paths_accumulate(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape():
            backward(ops.tensor_sum(x + ops.scale(x, 3.0)))
        np.testing.assert_array_equal(x.grad, [4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            with self.assertRaises(ShapeError):
                backward(ops.relu(x))

    def test_loss_without_grad_rejected(self):
        with self.assertRaises(ConfigurationError):
            backward(ops.tensor_sum(Tensor(np.ones(3))))

    def test_tape_is_consumed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = ops.tensor_sum(ops.relu(x))
            self.assertEqual(len(tape), 2)
            backward(loss)
            self.assertEqual(len(tape), 0)

    def test_no_grad_records_nothing(self):
        """
        📌 TEST: Ops run inside no_grad()
        EXPECTED: Nothing lands on the tape and outputs need no grad
        """
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                out = ops.relu(x)
            self.assertEqual(len(tape), 0)
            self.assertFalse(out.requires_grad)

    def test_gradients_are_deterministic(self):
        def run():
            rng = np.random.default_rng(11)
            x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
            k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
            b = Tensor(np.zeros(3), requires_grad=True)
            with Tape():
                backward(ops.tensor_sum(ops.global_avg_pool(ops.relu(ops.conv2d(x, k, b, 1, 1)))))
            return x.grad.copy(), k.grad.copy()

        first, second = run(), run()
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])


# ============================================================================
# TEST 3: FINITE DIFFERENCES
# ============================================================================
class GradientCheckTests(SimpleTestCase):
    """
    🔬 PURPOSE: Every op agrees with central finite differences
    WHY: Analytic gradients are hand-written
    """

    def test_every_op_passes_suite(self):
        results = run_gradient_suite(seed=0, trials=10)
        names = [r.name for r in results]
        self.assertEqual(len(names), len(set(names)))
        for result in results:
            self.assertTrue(result.passed, f"{result.name}: {result.max_rel_error:.3e}")

    def test_composed_graph_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        inputs = {
            "x": rng.normal(size=(1, 2, 6, 6)),
            "kernel": rng.normal(size=(3, 2, 3, 3)),
            "bias": rng.normal(size=3),
        }

        def build(t):
            feats = ops.relu(ops.conv2d(t["x"], t["kernel"], t["bias"], 1, 1))
            return ops.tensor_sum(ops.global_avg_pool(feats))

        self.assertTrue(check_gradients("conv-relu-gap", build, inputs).passed)

    def test_wrong_gradient_is_detected(self):
        """
        📌 TEST: A graph whose numeric evaluation differs from what the tape records
        EXPECTED: The finite-difference check reports a failure
        """
        rng = np.random.default_rng(12)

        def build(t):
            # Numeric evaluations see a doubled loss the tape never records.
            out = ops.tensor_sum(ops.relu(ops.elementwise_add(t["x"], Tensor(np.full(4, 10.0)))))
            return out if t["x"].requires_grad else ops.scale(out, 2.0)

        result = check_gradients("broken", build, {"x": rng.normal(size=4)})
        self.assertFalse(result.passed)
