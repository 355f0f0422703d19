from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import Network, UnsupportedModelError


@dataclass(frozen=True)
class BnTarget:
    """Frozen statistics of one BN layer. ``sigma`` is a variance."""

    layer_index: int  # 1-based ordinal among BN layers
    name: str
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def channels(self) -> int:
        return self.mu.shape[0]


@dataclass
class ModelBundle:
    network: Network
    arch: str
    input_spec: dict
    metadata: dict = field(default_factory=dict)

    @property
    def bn_targets(self) -> list[BnTarget]:
        return collect_bn_targets(self)

    @property
    def num_bn(self) -> int:
        return len(self.network.bn_nodes)

    @property
    def last_bn_index(self) -> int:
        return self.num_bn

    @property
    def output_head(self) -> str:
        return self.network.output

    @property
    def input_shape(self) -> tuple[int, int, int]:
        s = self.input_spec
        return s["channels"], s["height"], s["width"]


def collect_bn_targets(bundle: ModelBundle) -> list[BnTarget]:
    """The frozen statistics of every BN node, in topological order."""
    nodes = bundle.network.bn_nodes
    if not nodes:
        raise UnsupportedModelError("model has no BN layers; the statistics loss is undefined")
    return [BnTarget(i + 1, n.name, np.asarray(n.params["mean"], np.float64),
                     np.asarray(n.params["var"], np.float64)) for i, n in enumerate(nodes)]
