"""Layer-graph networks built from named nodes.

A :class:`Network` is a topologically ordered list of :class:`Node` objects.
Each node names its inputs; the first node is always the image input. Weights
are plain float32 arrays held on the nodes, and ``forward`` turns them into
constant tensors (or trainable ones when a parameter map is supplied).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..core import Tensor, ops

BN_EPS = 1e-5

OPS = ("input", "conv", "bn", "relu", "maxpool", "avgpool", "gap", "add", "flatten", "linear")


class UnsupportedModelError(ValueError):
    pass


@dataclass
class Node:
    name: str
    op: str
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ForwardResult:
    output: Tensor
    bn_inputs: list[Tensor]
    features: Tensor | None
    batch_stats: list[tuple[np.ndarray, np.ndarray]]


# Hook invoked after every node: (node, value) -> value.
NodeHook = Callable[[Node, Tensor], Tensor]


class Network:
    def __init__(self, nodes: list[Node], output: str, features: str | None = None,
                 bn_eps: float = BN_EPS):
        self.nodes = nodes
        self.output = output
        self.features = features
        self.bn_eps = bn_eps
        self._validate()

    def _validate(self) -> None:
        seen: set[str] = set()
        if not self.nodes or self.nodes[0].op != "input":
            raise ValueError("first node must be the input")
        for node in self.nodes:
            if node.op not in OPS:
                raise ValueError(f"unknown op {node.op!r} at node {node.name}")
            if node.name in seen:
                raise ValueError(f"duplicate node name {node.name}")
            missing = [i for i in node.inputs if i not in seen]
            if missing:
                raise ValueError(f"node {node.name} consumes {missing} before they are defined")
            seen.add(node.name)
        if self.output not in seen:
            raise ValueError(f"output {self.output} is not a node")

    # ------------------------------------------------------------ structure

    @property
    def bn_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "bn"]

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def consumers(self, name: str) -> list[Node]:
        return [n for n in self.nodes if name in n.inputs]

    def param_items(self):
        for node in self.nodes:
            for key, arr in node.params.items():
                yield f"{node.name}.{key}", arr

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        net = self.copy()
        for node in net.nodes:
            node.params = {k: v.astype(dtype) for k, v in node.params.items()}
        return net

    # ------------------------------------------------------------ evaluation

    def forward(self, x, *, train: bool = False, params: dict[str, Tensor] | None = None,
                hook: NodeHook | None = None, stop_at_last_bn: bool = False) -> ForwardResult:
        """Run the graph.

        ``train=True`` uses batch statistics in BN nodes and reports them in
        ``batch_stats``; otherwise the frozen running statistics are used.
        ``params`` maps "node.key" to tensors (e.g. trainable ones).
        ``stop_at_last_bn`` skips everything after the input of the final BN
        node; the returned output is then that BN input.
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        values: dict[str, Tensor] = {}
        bn_inputs: list[Tensor] = []
        batch_stats: list[tuple[np.ndarray, np.ndarray]] = []
        remaining_bn = len(self.bn_nodes)
        refcount = self._refcounts()

        def p(node: Node, key: str) -> Tensor | None:
            if key not in node.params:
                return None
            if params is not None and f"{node.name}.{key}" in params:
                return params[f"{node.name}.{key}"]
            return Tensor(node.params[key])

        for node in self.nodes:
            args = [values[i] for i in node.inputs]
            op = node.op
            if op == "input":
                y = x
            elif op == "conv":
                y = ops.conv2d(args[0], p(node, "weight"), p(node, "bias"),
                               stride=node.attrs.get("stride", 1), pad=node.attrs.get("pad", 0))
            elif op == "bn":
                bn_inputs.append(args[0])
                remaining_bn -= 1
                if stop_at_last_bn and remaining_bn == 0:
                    return ForwardResult(args[0], bn_inputs, None, batch_stats)
                if train:
                    y, bm, bv = ops.batchnorm_train(args[0], p(node, "gamma"), p(node, "beta"), self.bn_eps)
                    batch_stats.append((bm, bv))
                else:
                    y = ops.batchnorm(args[0], node.params["mean"], node.params["var"],
                                      p(node, "gamma"), p(node, "beta"), self.bn_eps)
            elif op == "relu":
                y = ops.relu(args[0])
            elif op == "maxpool":
                y = ops.max_pool2d(args[0], node.attrs.get("k", 2))
            elif op == "avgpool":
                y = ops.avg_pool2d(args[0], node.attrs.get("k", 2))
            elif op == "gap":
                y = ops.global_avg_pool(args[0])
            elif op == "add":
                y = ops.add(args[0], args[1])
            elif op == "flatten":
                y = ops.flatten(args[0])
            elif op == "linear":
                y = ops.linear(args[0], p(node, "weight"), p(node, "bias"))
            else:  # pragma: no cover - validated at construction
                raise ValueError(op)
            if hook is not None:
                y = hook(node, y)
            values[node.name] = y
            for i in node.inputs:
                refcount[i] -= 1
                if refcount[i] == 0 and i != self.features:
                    del values[i]
        return ForwardResult(values[self.output], bn_inputs,
                             values.get(self.features) if self.features else None, batch_stats)

    def _refcounts(self) -> dict[str, int]:
        counts = {n.name: 0 for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                counts[i] += 1
        counts[self.output] += 1
        return counts

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Logits for a stack of images, evaluated in chunks."""
        outs = [self.forward(images[i:i + batch_size]).output.data
                for i in range(0, len(images), batch_size)]
        return np.concatenate(outs, axis=0)
