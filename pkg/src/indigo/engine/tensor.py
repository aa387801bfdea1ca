"""Immutable dense tensors and the tape that records differentiable work."""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
DEFAULT_DTYPE = np.dtype(np.float32)


class ShapeError(ValueError):
    """Raised when a primitive receives operands with incompatible extents."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class Tensor:
    """A read-only n-d array of float32/float64 values.

    Tensors created by primitives while a :class:`Tape` is active (and with at
    least one operand requiring gradients) carry a backward rule.
    """

    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if dtype is None and arr.dtype not in DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.dtype not in DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # trusted constructor for primitive outputs, skips the defensive copy
        t = cls.__new__(cls)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.parents = ()
        t.vjp = None
        t.op = "leaf"
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def watch(self) -> "Tensor":
        """Return a fresh leaf sharing this data that requires gradients."""
        t = Tensor._wrap(self.data)
        t.requires_grad = True
        return t

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    # operator sugar; the primitives live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other) if isinstance(other, Tensor) else ops.affine(self, 1.0, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other) if isinstance(other, Tensor) else ops.affine(self, 1.0, -other)

    def __rsub__(self, other):
        from . import ops
        return ops.affine(self, -1.0, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive")
        return ops.scale(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        if dtype is not None and x.dtype != np.dtype(dtype):
            return Tensor._wrap(x.data.astype(dtype))
        return x
    return Tensor(x, dtype=dtype)


_state = threading.local()


def current_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the primitives evaluated inside a ``with`` block.

    Recording order is a topological order of the computation, so replaying it
    backwards visits every node after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, node: Tensor) -> None:
        for p in node.parents:
            if p.requires_grad and p.is_leaf:
                self.leaves.setdefault(id(p), p)
        self.nodes.append(node)

    def gradient(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
        return gradient(self, loss, wrt)


def gradient(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns a dict from leaf tensor to its gradient. Leaves in ``wrt`` that the
    loss does not depend on map to zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"gradient: seed must be a scalar loss, got shape {loss.shape}")
    leaves = list(wrt) if wrt is not None else list(tape.leaves.values())
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        out[leaf] = Tensor._wrap(np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False))
    return out


def evaluate(program: Callable[..., Tensor], inputs: Mapping[str, Tensor] | Sequence[Tensor] = ()):
    """Run ``program`` on ``inputs`` under a fresh tape.

    Mapping inputs are passed as keyword arguments, sequences positionally.
    Returns ``(value, tape)``.
    """
    with Tape() as tape:
        if isinstance(inputs, Mapping):
            value = program(**inputs)
        else:
            value = program(*inputs)
    return value, tape


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
        out.op = op
        tape.record(out)
    return out
