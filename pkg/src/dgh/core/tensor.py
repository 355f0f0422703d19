"""Tape-based reverse-mode differentiation over numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. Calling
:meth:`Tensor.backward` on a scalar walks the recorded DAG in reverse
topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str, message: str = "non-finite values"):
        self.op = op
        super().__init__(f"{op}: {message}")


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the named op."""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class UsageError(RuntimeError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *,
                 parents: tuple = (), backward_fn: BackwardFn | None = None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    # arithmetic sugar; definitions live in ops
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
        return ops.mul(self, -1.0)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None, *, retain_graph: bool = False) -> None:
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward on a non-scalar root requires an explicit gradient")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node.parents = ()
                node.backward_fn = None


def _topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from root that need gradients, root first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def make_node(op: str, data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn,
              check: bool = True) -> Tensor:
    if check and not np.isfinite(data).all():
        raise NumericError(op)
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  backward_fn=backward_fn if needs else None, op=op)


class Graph:
    """A reusable computation over named leaves.

    ``fn`` receives one :class:`Tensor` keyword argument per leaf and returns
    the root. Bound weights live inside ``fn`` (as constants), so a Graph is
    safe to share read-only; each :meth:`forward` call owns its own tape.
    """

    def __init__(self, fn: Callable[..., Tensor], leaves: Sequence[str],
                 differentiable: Iterable[str] | None = None, name: str = "graph"):
        self.fn = fn
        self.leaves = tuple(leaves)
        self.differentiable = set(self.leaves if differentiable is None else differentiable)
        unknown = self.differentiable - set(self.leaves)
        if unknown:
            raise ValueError(f"differentiable names not among leaves: {sorted(unknown)}")
        self.name = name
        self._root: Tensor | None = None
        self._leaf_tensors: dict[str, Tensor] = {}
        self._bound: dict[str, np.ndarray] = {}

    def forward(self, bindings: Mapping[str, np.ndarray]) -> Tensor:
        missing = [k for k in self.leaves if k not in bindings]
        if missing:
            raise UsageError(f"{self.name}: unbound leaves {missing}")
        self._leaf_tensors = {
            k: Tensor(np.asarray(bindings[k]), requires_grad=k in self.differentiable, name=k)
            for k in self.leaves
        }
        self._bound = {k: np.asarray(bindings[k]) for k in self.leaves}
        root = self.fn(**self._leaf_tensors)
        if not isinstance(root, Tensor):
            raise UsageError(f"{self.name}: fn must return a Tensor")
        if not np.isfinite(root.data).all():
            raise NumericError(self.name, "non-finite output")
        self._root = root
        return root

    def backward(self, at: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        if at is not None and not self._same_bindings(at):
            self.forward(at)
        if self._root is None:
            raise UsageError(f"{self.name}: backward called before forward")
        root = self._root
        if root.data.size != 1:
            raise UsageError(f"{self.name}: root must be scalar, got shape {root.shape}")
        for t in self._leaf_tensors.values():
            t.zero_grad()
        root.backward()
        self._root = None
        out = {}
        for k in self.differentiable:
            t = self._leaf_tensors[k]
            out[k] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def _same_bindings(self, at: Mapping[str, np.ndarray]) -> bool:
        if self._root is None:
            return False
        return all(k in at and np.array_equal(np.asarray(at[k]), v) for k, v in self._bound.items())


def forward(graph: Graph, bindings: Mapping[str, np.ndarray]) -> Tensor:
    return graph.forward(bindings)


def backward(graph: Graph, at: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    return graph.backward(at)
