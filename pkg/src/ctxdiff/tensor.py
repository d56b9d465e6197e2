"""Dense float tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array (f32 by default, f64 for
gradient checking).  Differentiable operations live in :mod:`ctxdiff.ops`;
while a :class:`GradientTape` is active on the current thread, every op whose
inputs require gradients appends a record to the tape.  ``backward`` walks the
records in reverse creation order -- a valid reverse topological order, since
an op can only consume tensors created before it -- and accumulates gradients
additively into every participating tensor.

Rules of the tape:

* at most one tape may be active per thread (nesting is a usage error),
* recording happens only while a tape is active; with no tape, ops run as
  plain numpy at full speed (inference mode),
* one ``backward`` per tape; each recorded op's backward runs exactly once,
* tensors are immutable after construction, with one sanctioned exception:
  ``assign_`` replaces a *leaf* parameter's values in place between training
  steps (the optimizer update).  Calling it on a taped intermediate is an
  error.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))

_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tensor:
    """Immutable dense array of f32/f64 values, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is not None:
            dt = np.dtype(dtype)
            if dt not in _ALLOWED:
                raise UsageError(f"unsupported tensor dtype {dt}; use float32 or float64")
            arr = np.asarray(data, dtype=dt)
        else:
            arr = np.asarray(data)
            if arr.dtype not in _ALLOWED:
                if isinstance(data, np.ndarray) and arr.dtype.kind == "f":
                    raise UsageError(
                        f"unsupported tensor dtype {arr.dtype}; use float32 or float64")
                arr = arr.astype(np.float32)  # python literals / ints default to f32
            elif not isinstance(data, np.ndarray):
                arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: GradientTape | None = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- mutation (parameters only) -----------------------------------------

    def assign_(self, values: np.ndarray) -> None:
        """Overwrite a leaf parameter's values in place (optimizer updates)."""
        if self._tape is not None:
            raise UsageError("assign_ on a tensor produced under a tape")
        values = np.asarray(values, dtype=self.data.dtype)
        if values.shape != self.data.shape:
            raise ShapeError(f"assign_ shape {values.shape} != parameter shape {self.data.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError("assign_ with non-finite values")
        self.data[...] = values

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Run reverse-mode accumulation from this (scalar) tensor."""
        if self._tape is None:
            raise UsageError("backward() on a tensor not produced under an active tape")
        self._tape._backward_from(self)

    # -- operator sugar (implementations live in ctxdiff.ops) ----------------

    def _ops(self):
        from . import ops

        return ops

    def __add__(self, other):
        return self._ops().add(self, other)

    def __radd__(self, other):
        return self._ops().add(self, other)

    def __sub__(self, other):
        return self._ops().sub(self, other)

    def __rsub__(self, other):
        return self._ops().sub(other, self)

    def __mul__(self, other):
        return self._ops().mul(self, other)

    def __rmul__(self, other):
        return self._ops().mul(self, other)

    def __neg__(self):
        return self._ops().mul(self, -1.0)

    def __matmul__(self, other):
        return self._ops().matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return self._ops().tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self._ops().tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return self._ops().reshape(self, shape)

    def transpose(self, axes):
        return self._ops().transpose(self, axes)


class GradientTape:
    """Records differentiable ops for one forward pass; context manager."""

    __slots__ = ("_records", "_entered", "_consumed")

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []
        self._entered = False
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        if _active_tape() is not None:
            raise UsageError("a GradientTape is already active on this thread")
        if self._entered:
            raise UsageError("GradientTape cannot be re-entered")
        self._entered = True
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def _record(self, out: Tensor, backward_fn) -> None:
        out._tape = self
        out.requires_grad = True
        self._records.append((out, backward_fn))

    def _backward_from(self, loss: Tensor) -> None:
        if self._consumed:
            raise UsageError("backward() called twice on the same tape")
        if loss.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        records = self._records
        # Walk newest-to-oldest.  Once a record fires, its output gradient has
        # been fully propagated to the parents and is dead weight, as is the
        # closure (which pins forward-pass buffers) -- release both so peak
        # memory tracks the live frontier instead of the whole graph.
        for i in range(len(records) - 1, -1, -1):
            out, backward_fn = records[i]
            records[i] = None
            if out.grad is None:
                continue  # branch that never reached the loss
            backward_fn(out.grad)
            out.grad = None
        self._records = []

    def __len__(self) -> int:
        return len(self._records)


# -- helpers used by ops ------------------------------------------------------


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` (allocating on first touch)."""
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=False)
    else:
        t.grad = t.grad + g


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
