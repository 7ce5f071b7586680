"""Dense float arrays with a recording tape for reverse-mode differentiation.

A Tensor wraps a row-major numpy array (float64 by default, float32 allowed).
Gradients are tracked only while a Tape is active: every differentiable
operation appends one record (output, inputs, vjp) in evaluation order, and
``Tape.backward`` replays the records once in reverse, accumulating adjoints.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ValueError):
    """A NaN or Inf reached a Tensor; values must stay finite."""


_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A finite, row-major float array; immutable by convention."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite value in tensor of shape %s" % (arr.shape,))
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Arithmetic operators are attached by mambaseg.nd.ops at import time to
    # avoid a circular import; see the bottom of that module.


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Single-writer record of operations for one differentiation pass.

    Use as a context manager around the forward computation, then call
    ``backward(loss)``.  Gradients land on ``tensor.grad`` for every
    requires-grad leaf seen by the tape; leaves that do not influence the
    loss get an explicit zero gradient.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a non-active tape")
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple, vjp) -> None:
        self._records.append(_Record(out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into .grad for all recorded leaves.

        Each record is visited exactly once, in reverse evaluation order.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(r.out) for r in self._records}
        leaves: dict[int, Tensor] = {}

        for rec in reversed(self._records):
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
            g = adjoint.pop(id(rec.out), None)
            if g is None:
                continue
            grads = rec.vjp(g)
            for t, gt in zip(rec.inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + gt
                else:
                    adjoint[key] = gt

        for key, leaf in leaves.items():
            g = adjoint.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every requires-grad leaf recorded by the tape."""
    tape.backward(loss)
