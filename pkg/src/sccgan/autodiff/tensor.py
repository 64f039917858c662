"""Tensor node, precision control and the reverse sweep."""

from __future__ import annotations

import contextlib
from typing import Callable, List, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "backward",
    "as_tensor",
    "precision",
    "default_dtype",
]

_DTYPE = [np.dtype(np.float32)]


def default_dtype() -> np.dtype:
    """Storage dtype for new tensors (float32 unless inside :func:`precision`)."""
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch tensor storage, e.g. ``with precision(np.float64):``.

    The 64-bit mode exists for gradient testing; training runs in float32.
    """
    _DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.pop()


class NonFiniteError(FloatingPointError):
    """A graph root (or a checked intermediate) holds NaN or inf."""


class Tensor:
    """A value in a reverse-mode computation graph.

    Leaves are created directly; interior nodes are produced by the functions
    in :mod:`sccgan.autodiff.ops`, which attach the parents and a closure that
    pushes ``self.grad`` into them.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *,
                 op: str = "leaf", parents: Sequence["Tensor"] = ()):
        arr = np.asarray(data)
        want = np.dtype(dtype) if dtype is not None else (
            arr.dtype if op != "leaf" and arr.dtype.kind == "f" else default_dtype())
        if arr.dtype != want:
            arr = arr.astype(want)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward: Optional[Callable[[], None]] = None

    # ------------------------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = g.reshape(self.data.shape)
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def backward(self, grad=None) -> "Tape":
        return backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Topologically ordered record of a graph, reconstructed from its root.

    Every node's parents precede it in ``nodes``.  Values and adjoints are the
    ``data`` and ``grad`` attributes of the nodes themselves.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = _toposort(root)

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> List[str]:
        return [n.op for n in self.nodes]

    def index(self, node: Tensor) -> int:
        for i, n in enumerate(self.nodes):
            if n is node:
                return i
        raise KeyError("node not on tape")

    def inputs(self, node: Tensor) -> List[int]:
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        return [pos[id(p)] for p in node._parents]


def _toposort(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad=None) -> Tape:
    """Accumulate d(root)/d(node) into ``.grad`` of every node that requires it.

    ``grad`` defaults to ones (so a scalar root gets adjoint 1).  Raises
    :class:`NonFiniteError` if the root value is not finite.
    """
    if not np.all(np.isfinite(root.data)):
        raise NonFiniteError(f"non-finite value at graph root ({root.op})")
    tape = Tape(root)
    if grad is None:
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(grad, dtype=root.data.dtype).reshape(root.shape)
    root._accumulate(seed)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward()
    return tape
