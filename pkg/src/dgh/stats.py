"""Activation statistics, whole-set aggregation, and the BN-statistics loss.

A set of M images split into N equal batches has whole-set mean equal to
the average of the batch means, and whole-set variance equal to the
average of the batch second moments minus the squared whole-set mean.
:class:`GlobalStatStore` keeps each batch's (mean, second moment) so the
whole-set statistics can be re-formed while only one batch is live in the
autodiff graph.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Tensor, ops
from .zoo.bundle import BnTarget

log = logging.getLogger(__name__)

NEG_VAR_SLACK = 1e-9


class StatsError(ValueError):
    pass


def batch_stats(feature_map: Tensor):
    """Per-channel (mean, second moment, variance) over batch and spatial axes.

    Differentiable; results are float64 tensors of length C.
    """
    if feature_map.data.ndim != 4:
        raise StatsError(f"expected an N x C x H x W feature map, got {feature_map.shape}")
    if feature_map.shape[0] == 0 or feature_map.shape[2] * feature_map.shape[3] == 0:
        raise StatsError("empty batch")
    mean = ops.moment(feature_map, (0, 2, 3), 1)
    sq = ops.moment(feature_map, (0, 2, 3), 2)
    return mean, sq, ops.sub(sq, ops.square(mean))


def grouped_stats(feature_map: Tensor, group: int):
    """(mean, second moment) per channel for consecutive groups of ``group`` images.

    Returns float64 tensors of shape (N // group, C). ``group=1`` gives
    per-image statistics over spatial positions only.
    """
    n, c, h, w = feature_map.shape
    if group < 1 or n % group:
        raise StatsError(f"batch of {n} cannot be split into groups of {group}")
    grouped = ops.reshape(feature_map, (n // group, group, c, h, w))
    return ops.moment(grouped, (1, 3, 4), 1), ops.moment(grouped, (1, 3, 4), 2)


def variance_from_moments(mean: Tensor, second: Tensor, where: str = "") -> Tensor:
    var = ops.sub(second, ops.square(mean))
    low = float(var.data.min()) if var.size else 0.0
    if low < -NEG_VAR_SLACK:
        log.warning("negative variance %.3e from moment cancellation%s; clamped to 0", low,
                    f" ({where})" if where else "")
    if low < 0:
        var = ops.relu(var)
    return var


@dataclass
class BatchStatRecord:
    """Stored per-layer mean and second moment of one batch (float64)."""

    batch_index: int
    count: int
    means: list[np.ndarray]
    second_moments: list[np.ndarray]

    def __post_init__(self):
        self.means = [np.asarray(m, dtype=np.float64) for m in self.means]
        self.second_moments = [np.asarray(s, dtype=np.float64) for s in self.second_moments]
        if len(self.means) != len(self.second_moments):
            raise StatsError("mean and second-moment layer counts differ")


def record_from_features(batch_index: int, bn_inputs: Sequence[Tensor]) -> BatchStatRecord:
    means, sqs = [], []
    for f in bn_inputs:
        m, s, _ = batch_stats(f)
        means.append(m.data)
        sqs.append(s.data)
    return BatchStatRecord(batch_index, bn_inputs[0].shape[0], means, sqs)


class GlobalStatStore:
    """Table of N batch records with lazily derived whole-set statistics.

    Batch indices are 0-based internally; ``replace_record`` accepts 1..N to
    match the usual batch numbering as well as 0..N-1 via ``zero_based``.
    """

    def __init__(self, num_batches: int):
        if num_batches < 1:
            raise StatsError("need at least one batch")
        self.num_batches = num_batches
        self.records: list[BatchStatRecord | None] = [None] * num_batches
        self._derived: list[tuple[np.ndarray, np.ndarray]] | None = None

    @property
    def stale(self) -> bool:
        return self._derived is None

    def set_record(self, n: int, record: BatchStatRecord) -> None:
        if not 0 <= n < self.num_batches:
            raise IndexError(f"batch index {n} outside [0, {self.num_batches})")
        self.records[n] = record
        self._derived = None

    def replace_record(self, n: int, record: BatchStatRecord, zero_based: bool = True) -> None:
        self.set_record(n if zero_based else n - 1, record)

    def _check(self) -> list[BatchStatRecord]:
        missing = [i for i, r in enumerate(self.records) if r is None]
        if missing:
            raise StatsError(f"records missing for batches {missing}")
        recs: list[BatchStatRecord] = self.records  # type: ignore[assignment]
        counts = {r.count for r in recs}
        if len(counts) != 1:
            raise StatsError(f"unequal batch sizes {sorted(counts)}; aggregation needs equal K")
        layers = {len(r.means) for r in recs}
        if len(layers) != 1:
            raise StatsError("records disagree on the number of layers")
        return recs

    def aggregate(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Whole-set per-layer (mean, variance), as float64 arrays."""
        if self._derived is None:
            recs = self._check()
            out = []
            for layer in range(len(recs[0].means)):
                mu = np.mean([r.means[layer] for r in recs], axis=0)
                m2 = np.mean([r.second_moments[layer] for r in recs], axis=0)
                var = m2 - mu * mu
                low = var.min()
                if low < -NEG_VAR_SLACK:
                    log.warning("negative aggregated variance %.3e at layer %d; clamped", low, layer + 1)
                out.append((mu, np.maximum(var, 0.0)))
            self._derived = out
        return self._derived

    def aggregate_with_active(self, n: int, means: Sequence[Tensor], seconds: Sequence[Tensor]):
        """Whole-set (mean, variance) tensors with batch ``n`` supplied live.

        The stored records of every other batch enter as constants, so
        gradients reach only the active batch.
        """
        recs = self._check()
        if means[0].shape[0] and recs[n].means[0].shape != means[0].shape:
            raise StatsError("active batch statistics have a different channel layout")
        N = self.num_batches
        out = []
        for layer, (m, s) in enumerate(zip(means, seconds)):
            other_m = np.sum([r.means[layer] for i, r in enumerate(recs) if i != n], axis=0) \
                if N > 1 else np.zeros_like(m.data)
            other_s = np.sum([r.second_moments[layer] for i, r in enumerate(recs) if i != n], axis=0) \
                if N > 1 else np.zeros_like(s.data)
            mu = ops.mul(ops.add(m, other_m), 1.0 / N)
            m2 = ops.mul(ops.add(s, other_s), 1.0 / N)
            out.append((mu, variance_from_moments(mu, m2, f"layer {layer + 1}")))
        return out


def aggregate_global(store: GlobalStatStore) -> list[tuple[np.ndarray, np.ndarray]]:
    return store.aggregate()


def replace_record(store: GlobalStatStore, n: int, new_record: BatchStatRecord) -> None:
    """Replace batch ``n`` (1-based) in the store."""
    if not 1 <= n <= store.num_batches:
        raise IndexError(f"batch {n} outside [1, {store.num_batches}]")
    store.replace_record(n, new_record, zero_based=False)


def bns_loss(stats, targets: Sequence[BnTarget]) -> Tensor:
    """Sum over layers of squared L2 gaps in mean and in variance."""
    if len(stats) != len(targets):
        raise StatsError(f"{len(stats)} layers of statistics for {len(targets)} BN targets")
    total = None
    for (mu, var), t in zip(stats, targets):
        mu = mu if isinstance(mu, Tensor) else Tensor(np.asarray(mu, np.float64))
        var = var if isinstance(var, Tensor) else Tensor(np.asarray(var, np.float64))
        if mu.shape[-1] != t.channels or var.shape[-1] != t.channels:
            raise StatsError(f"layer {t.layer_index}: {mu.shape[-1]} channels, target has {t.channels}")
        term = ops.add(ops.sum(ops.square(ops.sub(mu, t.mu))), ops.sum(ops.square(ops.sub(var, t.sigma))))
        total = term if total is None else ops.add(total, term)
    return total


def per_group_bns_loss(means: Sequence[Tensor], seconds: Sequence[Tensor],
                       targets: Sequence[BnTarget]) -> Tensor:
    """Sum over groups of the per-group statistics loss; inputs are (G, C)."""
    stats = [(m, variance_from_moments(m, s)) for m, s in zip(means, seconds)]
    return bns_loss(stats, targets)


def full_set_stats(network, images: np.ndarray, chunk: int = 64) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact whole-set statistics of every BN input, accumulated chunkwise in float64."""
    n = len(images)
    sums, sqs = None, None
    for i in range(0, n, chunk):
        res = network.forward(images[i:i + chunk], stop_at_last_bn=True)
        cur_s = [f.data.astype(np.float64).sum(axis=(0, 2, 3)) for f in res.bn_inputs]
        cur_q = [(f.data.astype(np.float64) ** 2).sum(axis=(0, 2, 3)) for f in res.bn_inputs]
        spatial = [f.shape[2] * f.shape[3] for f in res.bn_inputs]
        if sums is None:
            sums, sqs, dims = cur_s, cur_q, spatial
        else:
            sums = [a + b for a, b in zip(sums, cur_s)]
            sqs = [a + b for a, b in zip(sqs, cur_q)]
    out = []
    for s, q, d in zip(sums, sqs, dims):
        mu = s / (n * d)
        out.append((mu, np.maximum(q / (n * d) - mu * mu, 0.0)))
    return out


def stats_dump_csv(targets: Sequence[BnTarget], stats) -> str:
    """CSV rows (layer, channel, target_mu, target_sigma, global_mu, global_sigma)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["layer", "channel", "target_mu", "target_sigma", "global_mu", "global_sigma"])
    for t, (mu, var) in zip(targets, stats):
        mu = mu.data if isinstance(mu, Tensor) else mu
        var = var.data if isinstance(var, Tensor) else var
        for c in range(t.channels):
            w.writerow([t.layer_index, c, repr(float(t.mu[c])), repr(float(t.sigma[c])),
                        repr(float(mu[c])), repr(float(var[c]))])
    return buf.getvalue()
