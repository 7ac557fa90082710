"""
🔬 FINITE-DIFFERENCE GRADIENT CHECKS
WHAT: Re-runs a graph in float64 and compares the tape's analytic gradients
      with central differences.
WHEN: `manage.py gradcheck`, the autograd tests and the end-to-end model check.

A coordinate whose error exceeds the tolerance is probed again with a much
smaller step before it counts as a failure, so relu and max-pool kinks crossed
by the perturbation do not fail the check.
"""
import logging
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward, no_grad, precision

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-3
DEFAULT_TOLERANCE = 1e-4
KINK_STEP_FACTOR = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    trials: int = 1
    checked_coords: int = 0

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance


def relative_error(analytic, numeric):
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def _central_difference(evaluate, values, name, index, step):
    original = values[name][index]
    values[name][index] = original + step
    upper = evaluate(values)
    values[name][index] = original - step
    lower = evaluate(values)
    values[name][index] = original
    return (upper - lower) / (2.0 * step)


def check_gradients(name, build_loss, inputs, h=DEFAULT_STEP, tolerance=DEFAULT_TOLERANCE,
                    max_coords=None, seed=0):
    """
    Compare analytic and numeric gradients of `build_loss` w.r.t. `inputs`.

    `inputs` maps names to arrays; `build_loss` receives a dict of Tensors
    with the same keys and returns a scalar Tensor. When `max_coords` is set,
    at most that many coordinates per input are probed (chosen from `seed`).
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        values = {key: np.array(value, dtype=np.float64) for key, value in inputs.items()}

        with Tape():
            leaves = {key: Tensor(value, requires_grad=True, name=key) for key, value in values.items()}
            loss = build_loss(leaves)
            backward(loss)
        analytic = {key: leaf.grad.copy() for key, leaf in leaves.items()}

        def evaluate(current):
            with no_grad():
                return build_loss({key: Tensor(value) for key, value in current.items()}).item()

        worst = 0.0
        checked = 0
        for key, value in values.items():
            flat_count = value.size
            if max_coords is not None and flat_count > max_coords:
                coords = np.sort(rng.choice(flat_count, size=max_coords, replace=False))
            else:
                coords = np.arange(flat_count)
            grad_a = analytic[key].reshape(-1)[coords]
            grad_n = np.empty_like(grad_a)
            for slot, flat in enumerate(coords):
                index = np.unravel_index(flat, value.shape)
                grad_n[slot] = _central_difference(evaluate, values, key, index, h)

            scale = max(float(np.abs(grad_a).max(initial=0.0)), float(np.abs(grad_n).max(initial=0.0)), 1e-12)
            suspects = np.nonzero(np.abs(grad_a - grad_n) / scale >= tolerance)[0]
            for slot in suspects:
                index = np.unravel_index(coords[slot], value.shape)
                # Re-probe inside the linear piece around the point.
                grad_n[slot] = _central_difference(evaluate, values, key, index, h * KINK_STEP_FACTOR)

            worst = max(worst, relative_error(grad_a, grad_n))
            checked += len(coords)

    result = GradCheckResult(name=name, max_rel_error=worst, tolerance=tolerance, checked_coords=checked)
    logger.debug(f"gradcheck {name}: rel_error={worst:.3e} over {checked} coords")
    return result


# ==============================================================================
# PER-OP SUITE
# Each case factory draws a random small problem (extents <= 6) and returns
# (inputs, build_loss). Non-scalar op outputs are reduced against a fixed
# random weight map so every output cell contributes a distinct gradient.
# ==============================================================================

def _weighted_sum(out, weights):
    return ops.tensor_sum(ops.elementwise_mul(out, Tensor(weights)))


def _conv2d_case(rng):
    n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(3, 7), rng.integers(3, 7)
    k = int(rng.choice([1, 3]))
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    weights = rng.normal(size=(n, f, out_h, out_w))
    inputs = {
        "x": rng.normal(size=(n, c, h, w)),
        "kernel": rng.normal(size=(f, c, k, k)),
        "bias": rng.normal(size=(f,)),
    }
    return inputs, lambda t: _weighted_sum(ops.conv2d(t["x"], t["kernel"], t["bias"], stride, padding), weights)


def _maxpool2_case(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4)))
    weights = rng.normal(size=(shape[0], shape[1], shape[2] // 2, shape[3] // 2))
    return {"x": rng.normal(size=shape)}, lambda t: _weighted_sum(ops.maxpool2(t["x"]), weights)


def _upsample2_case(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=4))
    weights = rng.normal(size=(shape[0], shape[1], 2 * shape[2], 2 * shape[3]))
    return {"x": rng.normal(size=shape)}, lambda t: _weighted_sum(ops.upsample2(t["x"]), weights)


def _unary_case(op):
    def factory(rng):
        shape = tuple(int(v) for v in rng.integers(1, 7, size=2))
        weights = rng.normal(size=shape)
        return {"x": rng.normal(size=shape)}, lambda t: _weighted_sum(op(t["x"]), weights)
    return factory


def _elementwise_add_case(rng):
    shape = tuple(int(v) for v in rng.integers(1, 7, size=3))
    weights = rng.normal(size=shape)
    inputs = {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}
    return inputs, lambda t: _weighted_sum(ops.elementwise_add(t["a"], t["b"]), weights)


def _elementwise_mul_case(rng):
    n, c, h, w = (int(v) for v in rng.integers(1, 5, size=4))
    broadcast = bool(rng.integers(0, 2))
    mask_shape = (n, 1, h, w) if broadcast else (n, c, h, w)
    weights = rng.normal(size=(n, c, h, w))
    inputs = {"a": rng.normal(size=(n, c, h, w)), "b": rng.normal(size=mask_shape)}
    return inputs, lambda t: _weighted_sum(ops.elementwise_mul(t["a"], t["b"]), weights)


def _scale_case(rng):
    shape = tuple(int(v) for v in rng.integers(1, 7, size=2))
    factor = float(rng.normal())
    weights = rng.normal(size=shape)
    return {"x": rng.normal(size=shape)}, lambda t: _weighted_sum(ops.scale(t["x"], factor), weights)


def _concat_channels_case(rng):
    n, h, w = (int(v) for v in rng.integers(1, 5, size=3))
    ca, cb = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    weights = rng.normal(size=(n, ca + cb, h, w))
    inputs = {"a": rng.normal(size=(n, ca, h, w)), "b": rng.normal(size=(n, cb, h, w))}
    return inputs, lambda t: _weighted_sum(ops.concat_channels(t["a"], t["b"]), weights)


def _global_avg_pool_case(rng):
    shape = tuple(int(v) for v in rng.integers(1, 7, size=4))
    weights = rng.normal(size=shape[:2])
    return {"x": rng.normal(size=shape)}, lambda t: _weighted_sum(ops.global_avg_pool(t["x"]), weights)


def _reduction_case(op):
    def factory(rng):
        shape = tuple(int(v) for v in rng.integers(1, 7, size=3))
        axis = None if rng.integers(0, 2) else int(rng.integers(0, 3))
        if axis is None:
            return {"x": rng.normal(size=shape)}, lambda t: op(t["x"])
        out_shape = shape[:axis] + shape[axis + 1:]
        weights = rng.normal(size=out_shape)
        return {"x": rng.normal(size=shape)}, lambda t: _weighted_sum(op(t["x"], axis=axis), weights)
    return factory


def _reshape_case(rng):
    shape = tuple(int(v) for v in rng.integers(1, 7, size=3))
    target = (shape[2], shape[0] * shape[1])
    weights = rng.normal(size=target)
    return {"x": rng.normal(size=shape)}, lambda t: _weighted_sum(ops.reshape(t["x"], target), weights)


def _stack_case(rng):
    shape = tuple(int(v) for v in rng.integers(1, 7, size=2))
    count = int(rng.integers(2, 4))
    weights = rng.normal(size=(count,) + shape)
    inputs = {f"t{i}": rng.normal(size=shape) for i in range(count)}
    return inputs, lambda t: _weighted_sum(ops.stack([t[f"t{i}"] for i in range(count)]), weights)


def _cosine_similarity_case(rng):
    dim = int(rng.integers(2, 7))
    inputs = {"u": rng.normal(size=dim), "v": rng.normal(size=dim)}
    return inputs, lambda t: ops.cosine_similarity(t["u"], t["v"])


def _cross_entropy_case(rng):
    classes = int(rng.integers(2, 7))
    target = int(rng.integers(0, classes))
    return {"logits": rng.normal(size=classes)}, lambda t: ops.cross_entropy(t["logits"], target)


def _weighted_bce_case(rng):
    shape = (1, int(rng.integers(1, 7)), int(rng.integers(1, 7)))
    target = (rng.random(shape) < 0.5).astype(np.float64)
    beta = float(rng.uniform(1.0, 5.0))
    inputs = {"pred": rng.uniform(0.05, 0.95, size=shape)}
    return inputs, lambda t: ops.weighted_bce(t["pred"], target, beta)


GRADIENT_CASES = {
    "conv2d": _conv2d_case,
    "maxpool2": _maxpool2_case,
    "upsample2": _upsample2_case,
    "relu": _unary_case(ops.relu),
    "sigmoid": _unary_case(ops.sigmoid),
    "elementwise_add": _elementwise_add_case,
    "elementwise_mul": _elementwise_mul_case,
    "scale": _scale_case,
    "concat_channels": _concat_channels_case,
    "global_avg_pool": _global_avg_pool_case,
    "sum": _reduction_case(ops.tensor_sum),
    "mean": _reduction_case(ops.tensor_mean),
    "reshape": _reshape_case,
    "stack": _stack_case,
    "cosine_similarity": _cosine_similarity_case,
    "cross_entropy": _cross_entropy_case,
    "weighted_bce": _weighted_bce_case,
}


def run_gradient_suite(seed=0, trials=10, tolerance=DEFAULT_TOLERANCE):
    """One GradCheckResult per differentiable op, worst error over `trials` random draws."""
    results = []
    for op_index, (name, factory) in enumerate(GRADIENT_CASES.items()):
        worst = 0.0
        coords = 0
        for trial in range(trials):
            rng = np.random.default_rng([seed, op_index, trial])
            inputs, build_loss = factory(rng)
            result = check_gradients(name, build_loss, inputs, tolerance=tolerance, seed=trial)
            worst = max(worst, result.max_rel_error)
            coords += result.checked_coords
        results.append(GradCheckResult(name=name, max_rel_error=worst, tolerance=tolerance,
                                       trials=trials, checked_coords=coords))
        logger.info(f"gradcheck {name}: worst rel_error {worst:.3e} over {trials} trials")
    return results
