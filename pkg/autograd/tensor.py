"""
🧮 DENSE TENSORS + THE GRADIENT TAPE
WHAT: A numpy-backed Tensor that can take part in reverse-mode differentiation,
      and the Tape that records every differentiable op in execution order.
WHEN: Every feature map of the masked U-Net and every loss value is a Tensor.

Threading: the active tape, the grad switch and the working precision are all
thread-local, so independent tapes can run side by side (e.g. parallel
evaluation) without sharing mutable state.
"""
import logging
import threading
from contextlib import contextmanager

import numpy as np

from utils.exceptions import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

_local = threading.local()


# ==============================================================================
# PRECISION + GRAD SWITCHES
# Training runs in float32. The gradient-check harness flips the working
# precision to float64 for the duration of a check.
# ==============================================================================

def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Run the enclosed block with `dtype` as the working precision."""
    previous = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording (inference, registry updates, finite differences)."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


# ==============================================================================
# TAPE
# ==============================================================================

class TapeEntry:
    __slots__ = ("op", "inputs", "output", "backward_fn", "tape")

    def __init__(self, op, inputs, output, backward_fn, tape):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape

    def __repr__(self):
        return f"TapeEntry(op={self.op!r}, output_shape={self.output.shape})"


class Tape:
    """
    Ordered record of executed differentiable ops.

    Entries are appended as ops run, so an op's inputs always precede it.
    Use as a context manager to make a fresh tape the active one:

        with Tape():
            loss = build_loss(...)
            backward(loss)
    """

    def __init__(self):
        self.entries = []

    def record(self, op, inputs, output, backward_fn):
        entry = TapeEntry(op, tuple(inputs), output, backward_fn, self)
        output._entry = entry
        self.entries.append(entry)
        return entry

    def clear(self):
        for entry in self.entries:
            entry.output._entry = None
        self.entries = []

    def __len__(self):
        return len(self.entries)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = [Tape()]
        _local.tapes = stack
    return stack


def active_tape():
    return _tape_stack()[-1]


# ==============================================================================
# TENSOR
# ==============================================================================

class Tensor:
    """
    Dense n-dimensional value, row-major, last axis fastest.

    `grad` is allocated (zeros, same shape) exactly when `requires_grad` is set.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_entry")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._entry = None

    @classmethod
    def _wrap(cls, array, requires_grad=False, name=None):
        # No-copy constructor for op outputs.
        tensor = cls.__new__(cls)
        tensor.data = np.asarray(array, dtype=default_dtype())
        tensor.requires_grad = requires_grad
        tensor.grad = np.zeros_like(tensor.data) if requires_grad else None
        tensor.name = name
        tensor._entry = None
        return tensor

    # ----- shape helpers -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __float__(self):
        return self.item()

    def detach(self):
        return Tensor(self.data.copy(), name=self.name)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __add__(self, other):
        from .ops import elementwise_add
        return elementwise_add(self, other)

    def __mul__(self, other):
        from .ops import elementwise_mul
        return elementwise_mul(self, other)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def accumulate_grad(tensor, grad):
    """Add `grad` into `tensor.grad` (no-op for tensors outside the graph)."""
    if tensor.requires_grad:
        tensor.grad += np.asarray(grad, dtype=tensor.grad.dtype).reshape(tensor.grad.shape)


# ==============================================================================
# BACKWARD
# ==============================================================================

def backward(loss):
    """
    Populate `.grad` on every requires_grad tensor reachable from `loss`.

    Entries are visited once each, in reverse tape order, so gradient
    accumulation order is fixed. The tape is consumed afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ConfigurationError("backward() called on a tensor that does not require grad")

    tape = active_tape()
    if loss._entry is None:
        # A leaf used directly as the loss.
        loss.grad += 1
        return
    if loss._entry.tape is not tape:
        raise ConfigurationError("backward() called on a loss recorded on a different tape")

    reachable = set()
    pending = [loss._entry]
    while pending:
        entry = pending.pop()
        if id(entry) in reachable:
            continue
        reachable.add(id(entry))
        for tensor in entry.inputs:
            if tensor._entry is not None:
                pending.append(tensor._entry)

    loss.grad += 1
    visited = 0
    for entry in reversed(tape.entries):
        if id(entry) in reachable:
            entry.backward_fn(entry.output.grad)
            visited += 1
    logger.debug(f"backward visited {visited}/{len(tape)} tape entries")
    tape.clear()
