"""
Differentiable ops for the masked U-Net and its two losses.

Every op validates its operand shapes, computes the forward value with numpy,
refuses non-finite results and, when any input requires grad, records a
backward closure on the active tape.
"""
import logging
import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.exceptions import NonFiniteError, ShapeError

from .tensor import Tensor, accumulate_grad, active_tape, is_grad_enabled

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8


class DegeneratePrototypeWarning(RuntimeWarning):
    """A cosine-similarity operand had (near) zero norm and was clamped."""


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _finish(op, data, inputs, backward_fn):
    if not np.all(np.isfinite(data)):
        # Blame a named input (a parameter), a non-finite one first.
        named = [t for t in inputs if t.name]
        broken = [t for t in named if not np.all(np.isfinite(t.data))]
        culprit = (broken or named)[0].name if named else op
        raise NonFiniteError(f"{op} produced non-finite values (input {culprit})", tensor_name=culprit)
    requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=requires_grad)
    if requires_grad:
        active_tape().record(op, inputs, out, backward_fn)
    return out


def _require_4d(op, tensor):
    if tensor.ndim != 4:
        raise ShapeError(f"{op} expects [N,C,H,W], got shape {tensor.shape}")


# ==============================================================================
# CONVOLUTION / RESAMPLING
# ==============================================================================

def conv2d(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation of [N,C,H,W] with [F,C,kh,kw] plus a per-filter bias."""
    _require_4d("conv2d", x)
    _require_4d("conv2d", kernel)
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0 (got {stride}, {padding})")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # (N, C, out_h, out_w, kh, kw)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]

    def backward_fn(grad):
        if kernel.requires_grad:
            accumulate_grad(kernel, np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3])))
        if bias.requires_grad:
            accumulate_grad(bias, grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(grad, kernel.data[:, :, i, j], axes=([1], [0]))
                    dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                        contrib.transpose(0, 3, 1, 2)
                    )
            accumulate_grad(x, dxp[:, :, padding:padding + h, padding:padding + w])

    return _finish("conv2d", out, (x, kernel, bias), backward_fn)


def maxpool2(x):
    """2x2 max-pool, stride 2. Ties go to the first cell in row-major order."""
    _require_4d("maxpool2", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum -> row-major tie break
    winner = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, winner, axis=-1)[..., 0]

    def backward_fn(grad):
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, winner, grad[..., None], axis=-1)
        routed = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        accumulate_grad(x, routed.reshape(n, c, h, w))

    return _finish("maxpool2", out, (x,), backward_fn)


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    _require_4d("upsample2", x)
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward_fn(grad):
        accumulate_grad(x, grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _finish("upsample2", out, (x,), backward_fn)


# ==============================================================================
# ELEMENTWISE
# ==============================================================================

def relu(x):
    out = np.maximum(x.data, 0)

    def backward_fn(grad):
        accumulate_grad(x, grad * (x.data > 0))

    return _finish("relu", out, (x,), backward_fn)


def sigmoid(x):
    decay = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay)).astype(x.dtype)

    def backward_fn(grad):
        accumulate_grad(x, grad * out * (1.0 - out))

    return _finish("sigmoid", out, (x,), backward_fn)


def elementwise_add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(grad):
        accumulate_grad(a, grad)
        accumulate_grad(b, grad)

    return _finish("elementwise_add", out, (a, b), backward_fn)


def elementwise_mul(a, b):
    """
    Elementwise product. `b` may also be a per-pixel mask [N,1,H,W] that is
    broadcast over the channels of a [N,C,H,W] feature map.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    broadcast = (
        a.shape != b.shape
        and a.ndim == 4
        and b.shape == (a.shape[0], 1, a.shape[2], a.shape[3])
    )
    if a.shape != b.shape and not broadcast:
        raise ShapeError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward_fn(grad):
        accumulate_grad(a, grad * b.data)
        if broadcast:
            accumulate_grad(b, (grad * a.data).sum(axis=1, keepdims=True))
        else:
            accumulate_grad(b, grad * a.data)

    return _finish("elementwise_mul", out, (a, b), backward_fn)


def scale(x, factor):
    """Multiply by a constant."""
    factor = float(factor)
    out = x.data * factor

    def backward_fn(grad):
        accumulate_grad(x, grad * factor)

    return _finish("scale", out, (x,), backward_fn)


def concat_channels(a, b):
    _require_4d("concat_channels", a)
    _require_4d("concat_channels", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching N,H,W: {a.shape} vs {b.shape}")
    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(grad):
        accumulate_grad(a, grad[:, :split])
        accumulate_grad(b, grad[:, split:])

    return _finish("concat_channels", out, (a, b), backward_fn)


# ==============================================================================
# REDUCTIONS / RESHAPING
# ==============================================================================

def global_avg_pool(x):
    """[N,C,H,W] -> [N,C] per-channel spatial mean."""
    _require_4d("global_avg_pool", x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(grad):
        accumulate_grad(x, np.broadcast_to(grad[:, :, None, None] / (h * w), x.shape))

    return _finish("global_avg_pool", out, (x,), backward_fn)


def tensor_sum(x, axis=None):
    out = np.asarray(x.data.sum(axis=axis))

    def backward_fn(grad):
        expanded = grad if axis is None else np.expand_dims(grad, axis)
        accumulate_grad(x, np.broadcast_to(expanded, x.shape))

    return _finish("sum", out, (x,), backward_fn)


def tensor_mean(x, axis=None):
    count = x.size if axis is None else x.shape[axis]
    out = np.asarray(x.data.mean(axis=axis))

    def backward_fn(grad):
        expanded = grad if axis is None else np.expand_dims(grad, axis)
        accumulate_grad(x, np.broadcast_to(expanded / count, x.shape))

    return _finish("mean", out, (x,), backward_fn)


def reshape(x, shape):
    out = x.data.reshape(shape)

    def backward_fn(grad):
        accumulate_grad(x, grad.reshape(x.shape))

    return _finish("reshape", out, (x,), backward_fn)


def stack(tensors):
    """Stack equally shaped tensors along a new leading axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError(f"stack needs equal shapes, got {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors])

    def backward_fn(grad):
        for index, tensor in enumerate(tensors):
            accumulate_grad(tensor, grad[index])

    return _finish("stack", out, tuple(tensors), backward_fn)


# ==============================================================================
# SIMILARITY / LOSS KERNELS
# ==============================================================================

def cosine_similarity(u, v):
    """
    u.v / (|u| |v|) as a scalar tensor, clamped to [-1, 1].

    Norms below COSINE_EPS are clamped to COSINE_EPS and a
    DegeneratePrototypeWarning is raised.
    """
    u, v = _as_tensor(u), _as_tensor(v)
    if u.size != v.size:
        raise ShapeError(f"cosine_similarity size mismatch: {u.shape} vs {v.shape}")
    ud = u.data.reshape(-1)
    vd = v.data.reshape(-1)
    u_norm_raw = float(np.sqrt(ud @ ud))
    v_norm_raw = float(np.sqrt(vd @ vd))
    if u_norm_raw < COSINE_EPS or v_norm_raw < COSINE_EPS:
        logger.warning(
            f"⚠️ Degenerate prototype: norms ({u_norm_raw:.3g}, {v_norm_raw:.3g}) clamped to {COSINE_EPS}"
        )
        warnings.warn("zero-norm vector in cosine similarity", DegeneratePrototypeWarning, stacklevel=2)
    u_norm = max(u_norm_raw, COSINE_EPS)
    v_norm = max(v_norm_raw, COSINE_EPS)
    similarity = float(ud @ vd) / (u_norm * v_norm)
    out = np.asarray(min(1.0, max(-1.0, similarity)))

    def backward_fn(grad):
        g = float(grad)
        if u.requires_grad:
            du = vd / (u_norm * v_norm)
            if u_norm_raw >= COSINE_EPS:
                du = du - similarity * ud / (u_norm * u_norm)
            accumulate_grad(u, g * du)
        if v.requires_grad:
            dv = ud / (u_norm * v_norm)
            if v_norm_raw >= COSINE_EPS:
                dv = dv - similarity * vd / (v_norm * v_norm)
            accumulate_grad(v, g * dv)

    return _finish("cosine_similarity", out, (u, v), backward_fn)


def cross_entropy(logits, target):
    """-log softmax(logits)[target] for a 1-D logit vector."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects a 1-D logit vector, got {logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise ShapeError(f"cross_entropy target {target} out of range for {logits.shape[0]} classes")
    top = logits.data.max()
    exps = np.exp(logits.data - top)
    total = exps.sum()
    out = np.asarray(top + np.log(total) - logits.data[target])

    def backward_fn(grad):
        probs = exps / total
        probs[target] -= 1.0
        accumulate_grad(logits, float(grad) * probs)

    return _finish("cross_entropy", out, (logits,), backward_fn)


def weighted_bce(pred, target, beta, eps=1e-7):
    """
    mean(-[beta * y * log(p) + (1 - y) * log(1 - p)]) with p clamped to
    [eps, 1 - eps]. `target` is constant.
    """
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"weighted_bce shape mismatch: {pred.shape} vs {target.shape}")
    beta = float(beta)
    clipped = np.clip(pred.data, eps, 1.0 - eps)
    y = target.data
    count = pred.size
    out = np.asarray(-(beta * y * np.log(clipped) + (1.0 - y) * np.log(1.0 - clipped)).sum() / count)

    def backward_fn(grad):
        inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)
        local = -(beta * y / clipped - (1.0 - y) / (1.0 - clipped)) / count
        accumulate_grad(pred, float(grad) * local * inside)

    return _finish("weighted_bce", out, (pred, target), backward_fn)
