"""Reverse-mode autodiff core.

Every differentiable primitive records a :class:`Node` on the output tensor.
Nodes carry a global sequence number, so :func:`backward` can replay the
adjoints in exact reverse execution order. A graph can only be replayed once;
its nodes release their saved buffers afterwards.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised on invalid backward calls (non-scalar loss, stale graph)."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-d real array with an optional gradient.

    Network activations are rank-5 ``[N, C, D, H, W]``; the class itself
    accepts any rank so that logits and scalar losses share the type.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data.data if isinstance(data, Tensor) else data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data: np.ndarray = arr.astype(dtype, copy=False)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # Operator sugar; the primitives live in ``ops``.
    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.shift(self, -float(other))

    def __mul__(self, other):
        from . import ops

        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


class Node:
    """One executed primitive: its inputs and the adjoint closure."""

    __slots__ = ("seq", "op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: Sequence[Tensor], backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.consumed = False


class Graph:
    """Nodes reachable from an output, ordered by execution sequence."""

    def __init__(self, nodes: list[Node]):
        self.nodes = sorted(nodes, key=lambda n: n.seq)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen: dict[int, Node] = {}
        stack = [out._node] if out._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        return cls(list(seen.values()))

    def reverse(self) -> list[Node]:
        return self.nodes[::-1]

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def make_output(
    data: np.ndarray,
    op: str,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap an op result and record the node when any input needs a gradient.

    ``backward_fn`` maps the output adjoint to one adjoint per input (or None
    for inputs that do not need one).
    """
    check_finite(data, op)
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        out._node = Node(op, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if not loss.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    graph = Graph.from_output(loss)
    if any(n.consumed for n in graph.nodes):
        raise GraphError("graph already consumed by a previous backward; run a new forward")

    pending: dict[int, np.ndarray] = {id(loss._node): seed}
    for node in graph.reverse():
        g_out = pending.pop(id(node), None)
        fn = node.backward_fn
        node.consumed = True
        node.backward_fn = None
        if g_out is None:
            node.inputs = ()
            continue
        grads = fn(g_out)
        inputs, node.inputs = node.inputs, ()
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t._node is not None:
                key = id(t._node)
                pending[key] = g if key not in pending else pending[key] + g
            else:
                if g.shape != t.shape:
                    raise GraphError(f"adjoint shape {g.shape} != leaf shape {t.shape} in {node.op}")
                t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g
