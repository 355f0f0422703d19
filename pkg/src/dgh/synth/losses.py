"""Output distribution stretching loss and the combined synthesis objective."""
from __future__ import annotations

import warnings

import numpy as np

from ..core import Tensor, ops
from ..zoo.bundle import BnTarget


def odsl(outputs: Tensor, last_mu: Tensor, last_var: Tensor, target: BnTarget, delta: float) -> Tensor:
    """Per-image stretching loss, shape (K,).

    For image k: -(max_i out_k - min_i out_k)^2
                 + max(|mu_k - mu_L|^2 - delta, 0) + max(|var_k - var_L|^2 - delta, 0)

    ``outputs`` is (K, ...) and is flattened per image; ``last_mu`` and
    ``last_var`` are (K, C) statistics of each image at the last BN input.
    The caller averages over the image set.
    """
    if outputs.data.ndim > 2:
        outputs = ops.flatten(outputs)
    if outputs.shape[1] == 1:
        warnings.warn("scalar model output: the range term of the stretching loss is identically 0",
                      RuntimeWarning, stacklevel=2)
    span = ops.sub(ops.reduce_max(outputs, axis=1), ops.reduce_min(outputs, axis=1))
    span = ops.astype(span, np.float64)
    mu_gap = ops.sum(ops.square(ops.sub(last_mu, target.mu)), axis=1)
    var_gap = ops.sum(ops.square(ops.sub(last_var, target.sigma)), axis=1)
    hinge = ops.add(ops.relu(ops.sub(mu_gap, delta)), ops.relu(ops.sub(var_gap, delta)))
    return ops.sub(hinge, ops.square(span))


def total_loss(bns: Tensor, odsl_value: Tensor | float | None, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if odsl_value is None or lam == 0:
        return bns
    return ops.add(bns, ops.mul(odsl_value, lam))
