"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation that touches a tensor with ``requires_grad``
produces a :class:`Record` holding the inputs, the output and a closure that
maps the output gradient to input gradients. Records are linked from their
output tensor, and are additionally appended to the innermost active
:class:`Tape`, so a backward pass can either replay a tape in reverse or
topologically sort the graph reachable from the loss.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


class DimensionError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``data`` is a contiguous numpy array; ``grad`` (when set) always has the
    same shape. Non-tracking tensors are treated as immutable.
    """

    __slots__ = ("data", "requires_grad", "grad", "_record", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim and min(arr.shape) < 1:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: Record | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.requires_grad = False
        t.grad = None
        t._record = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def backward(self, tape: "Tape | None" = None) -> None:
        backward(self, tape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic used by losses, tests and small helpers
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.mul(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum_all(self)

    def mean(self):
        from . import ops
        return ops.mean_all(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


@dataclass(eq=False)
class Record:
    """One executed operation: enough to push gradients back to its inputs."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered log of recorded operations.

    Use as a context manager; operations executed inside the block are
    appended in execution order, which makes reverse order a valid reverse
    topological order.
    """

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


def record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` as a tensor and log the op when any input is tracked."""
    out = Tensor._wrap(out_data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec = Record(kind, tuple(inputs), out, backward_fn)
        out._record = rec
        stack = _tape_stack()
        if stack:
            stack[-1].records.append(rec)
    return out


def _topo_records(root: Tensor) -> list[Record]:
    order: list[Record] = []
    seen: set[int] = set()
    if root._record is None:
        return order
    # iterative post-order DFS; graphs can be deep enough to hit the recursion limit
    stack: list[tuple[Record, bool]] = [(root._record, False)]
    while stack:
        rec, expanded = stack.pop()
        if expanded:
            order.append(rec)
            continue
        if id(rec) in seen:
            continue
        seen.add(id(rec))
        stack.append((rec, True))
        for t in rec.inputs:
            if t._record is not None and id(t._record) not in seen:
                stack.append((t._record, False))
    return order


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor ``t``.

    With ``tape`` the tape is replayed in reverse; otherwise the graph reachable
    from ``loss`` is sorted topologically. Gradients add onto existing ``grad``
    buffers, so call ``zero_grad`` between independent steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is not None and loss._record is not None and not any(r is loss._record for r in reversed(tape.records)):
        # the loss was computed outside this tape; its graph is the only reliable order
        tape = None
    records = tape.records if tape is not None else _topo_records(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        _accumulate(rec.output, g_out)
        for inp, g in zip(rec.inputs, rec.backward_fn(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                touched[key] = inp
    # leaves (and anything the tape did not cover) keep what is left over
    for key, g in grads.items():
        _accumulate(touched[key], g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g
