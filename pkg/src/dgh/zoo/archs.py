"""Reference architectures: small BN-bearing CNNs for 3x32x32 inputs."""
from __future__ import annotations

import numpy as np

from .network import Network, Node


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.nodes = [Node("input", "input")]
        self.counter: dict[str, int] = {}

    def _name(self, op: str) -> str:
        self.counter[op] = self.counter.get(op, 0) + 1
        return f"{op}{self.counter[op]}"

    def add(self, op: str, inputs: list[str], attrs=None, params=None) -> str:
        name = self._name(op)
        self.nodes.append(Node(name, op, list(inputs), attrs or {}, params or {}))
        return name

    def conv(self, src: str, cin: int, cout: int, k: int = 3, stride: int = 1) -> str:
        std = np.sqrt(2.0 / (cin * k * k))
        w = (self.rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
        return self.add("conv", [src], {"stride": stride, "pad": k // 2}, {"weight": w})

    def bn(self, src: str, c: int) -> str:
        return self.add("bn", [src], params={
            "gamma": np.ones(c, np.float32), "beta": np.zeros(c, np.float32),
            "mean": np.zeros(c, np.float32), "var": np.ones(c, np.float32)})

    def conv_bn_relu(self, src: str, cin: int, cout: int, stride: int = 1) -> str:
        return self.add("relu", [self.bn(self.conv(src, cin, cout, stride=stride), cout)])

    def residual(self, src: str, c: int) -> str:
        h = self.conv_bn_relu(src, c, c)
        h = self.bn(self.conv(h, c, c), c)
        return self.add("relu", [self.add("add", [h, src])])

    def head(self, src: str, c: int, num_classes: int) -> Network:
        feats = self.add("gap", [src])
        w = (self.rng.standard_normal((num_classes, c)) / np.sqrt(c)).astype(np.float32)
        out = self.add("linear", [feats], params={"weight": w, "bias": np.zeros(num_classes, np.float32)})
        return Network(self.nodes, output=out, features=feats)


def tiny_resnet(num_classes: int = 10, widths=(16, 32), seed: int = 0) -> Network:
    """Stem, three residual blocks, global average pool, linear head.

    Layout: conv-BN-ReLU stem, 2x2 max pool, residual block at ``widths[0]``,
    strided conv-BN-ReLU transition, two residual blocks at ``widths[1]``.
    The tail after the last BN (add, ReLU, pool, linear) carries no BN.
    """
    b = _Builder(np.random.default_rng(seed))
    c0, c1 = widths
    h = b.conv_bn_relu("input", 3, c0)
    h = b.add("maxpool", [h], {"k": 2})
    h = b.residual(h, c0)
    h = b.conv_bn_relu(h, c0, c1, stride=2)
    h = b.residual(h, c1)
    h = b.residual(h, c1)
    return b.head(h, c1, num_classes)


def tiny_vgg(num_classes: int = 10, widths=(16, 32, 32, 64), seed: int = 0) -> Network:
    """Four conv-BN-ReLU stages separated by max pools."""
    b = _Builder(np.random.default_rng(seed))
    h, cin = "input", 3
    for i, c in enumerate(widths):
        h = b.conv_bn_relu(h, cin, c)
        if i < len(widths) - 1:
            h = b.add("maxpool", [h], {"k": 2})
        cin = c
    return b.head(h, cin, num_classes)


ARCHITECTURES = {"tiny-resnet": tiny_resnet, "tiny-vgg": tiny_vgg}


def build(arch: str, num_classes: int = 10, seed: int = 0, **kwargs) -> Network:
    try:
        fn = ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}") from None
    return fn(num_classes=num_classes, seed=seed, **kwargs)
