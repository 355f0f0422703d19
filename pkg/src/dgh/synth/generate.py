"""Image-set synthesis by BN-statistics matching.

Three aggregation modes share one loop:

``global``
    Statistics of the whole set are re-formed each step from stored
    per-batch records plus the live statistics of the active batch. Only
    the active batch receives gradients; the others enter as constants from
    their last recomputation.
``per-batch``
    Each group of ``scope`` images is matched independently.
``per-image``
    Each image is matched on its own (``scope = 1``).

In every mode the objective of a scope S is
``BNS(S) + lam * mean_{k in S} odsl_k``.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import NumericError, Tensor, ops
from ..stats import (GlobalStatStore, bns_loss, full_set_stats, grouped_stats,
                     per_group_bns_loss, record_from_features, variance_from_moments, batch_stats)
from ..zoo.bundle import ModelBundle, collect_bn_targets
from . import preprocess as prep
from .losses import odsl, total_loss
from .optim import RAdamState, ReduceLROnPlateau, radam_step

log = logging.getLogger(__name__)

MODES = ("global", "per-batch", "per-image")


class SynthesisError(RuntimeError):
    def __init__(self, iteration: int, message: str):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")


@dataclass
class SynthesisConfig:
    num_images: int = 64
    batch_size: int = 8  # images per optimization step (K)
    iterations: int = 300  # epochs over all batches (T)
    mode: str = "global"
    scope: int | None = None  # statistics scope for per-batch mode; defaults to batch_size
    lam: float = 0.1
    delta: float | None = None  # None -> 10% of |sigma_L|^2
    lr: float = 2.0
    betas: tuple[float, float] = (0.9, 0.999)
    scheduler_factor: float = 0.5
    scheduler_patience: int | None = None  # None -> max(20, T // 20)
    smoothing: bool = True
    flip: bool = True
    crop: bool = True
    crop_margin: int | None = None  # None -> scaled from 32 px at 224
    odsl: bool = True
    reuse_draw: bool = False  # post-update recompute reuses the step's augmentation draw
    clip: bool = True  # project updated pixels onto the model's declared input range

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lam < 0 or (self.delta is not None and self.delta < 0):
            raise ValueError("lambda and delta must be non-negative")
        if self.num_images < 1 or self.batch_size < 1:
            raise ValueError("need at least one image per batch")
        if self.num_images % self.batch_size:
            raise ValueError(f"{self.num_images} images cannot be split into batches of {self.batch_size}")
        if self.crop_margin is not None and (self.crop_margin < 0 or self.crop_margin % 2):
            raise ValueError("crop margin must be non-negative and even")
        s = self.effective_scope
        if self.mode != "global" and self.batch_size % s:
            raise ValueError(f"scope {s} must divide the batch size {self.batch_size}")

    @property
    def num_batches(self) -> int:
        return self.num_images // self.batch_size

    @property
    def effective_scope(self) -> int:
        if self.mode == "per-image":
            return 1
        if self.mode == "per-batch":
            return self.scope or self.batch_size
        return self.num_images

    def margin_for(self, height: int) -> int:
        if not self.crop:
            return 0
        return prep.crop_margin_for(height) if self.crop_margin is None else self.crop_margin

    def patience(self) -> int:
        return self.scheduler_patience if self.scheduler_patience is not None else max(20, self.iterations // 20)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class ImageSet:
    images: np.ndarray  # M, C, H + margin, W + margin raw canvases
    batch_size: int
    out_size: tuple[int, int]
    seed: int
    states: list[RAdamState] = field(default_factory=list)

    @property
    def num_batches(self) -> int:
        return len(self.images) // self.batch_size

    def batch_slice(self, n: int) -> slice:
        return slice(n * self.batch_size, (n + 1) * self.batch_size)

    def final_images(self, smoothing: bool = True) -> np.ndarray:
        """Calibration view: fixed smoothing (when enabled) and a center crop."""
        return prep.eval_view(self.images, self.out_size, smoothing)

    def center_cropped(self) -> np.ndarray:
        return prep.center_crop(self.images, self.out_size)


@dataclass
class TraceRow:
    epoch: int
    batch: int
    bns: float
    odsl: float
    total: float
    lr: float


@dataclass
class LossTrace:
    rows: list[TraceRow] = field(default_factory=list)
    initial_full_bns: float = float("nan")
    final_full_bns: float = float("nan")

    def epoch_totals(self) -> np.ndarray:
        if not self.rows:
            return np.zeros(0)
        epochs = max(r.epoch for r in self.rows)
        out = np.zeros(epochs)
        counts = np.zeros(epochs)
        for r in self.rows:
            out[r.epoch - 1] += r.total
            counts[r.epoch - 1] += 1
        return out / np.maximum(counts, 1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["epoch", "batch", "bns", "odsl", "total", "lr"])
        for r in self.rows:
            w.writerow([r.epoch, r.batch, repr(r.bns), repr(r.odsl), repr(r.total), repr(r.lr)])
        return buf.getvalue()


def init_image_set(cfg: SynthesisConfig, input_spec: dict, seed: int) -> ImageSet:
    """Standard-normal canvases, sized for the crop margin when cropping is on."""
    cfg.validate()
    c, h, w = input_spec["channels"], input_spec["height"], input_spec["width"]
    margin = cfg.margin_for(h)
    if margin >= min(h, w):
        raise ValueError(f"crop margin {margin} exceeds image size {h}x{w}")
    rng = np.random.default_rng([seed, 0])
    images = rng.standard_normal((cfg.num_images, c, h + margin, w + margin)).astype(np.float32)
    states = [RAdamState.zeros_like(images[i * cfg.batch_size:(i + 1) * cfg.batch_size])
              for i in range(cfg.num_batches)]
    return ImageSet(images, cfg.batch_size, (h, w), seed, states)


def full_set_bns(bundle: ModelBundle, images: np.ndarray, chunk: int = 64) -> float:
    """Whole-set statistics loss of already preprocessed model inputs."""
    stats = full_set_stats(bundle.network, images, chunk)
    return bns_loss(stats, collect_bn_targets(bundle)).item()


class _Step:
    """Objective of one active batch, shared by the generator and gradient tests."""

    def __init__(self, bundle: ModelBundle, cfg: SynthesisConfig, image_set: ImageSet,
                 store: GlobalStatStore | None, delta: float):
        self.bundle = bundle
        self.cfg = cfg
        self.targets = collect_bn_targets(bundle)
        self.image_set = image_set
        self.store = store
        self.delta = delta

    def prep(self, x: Tensor, rng, fixed=None):
        c = self.cfg
        return prep.preprocess(x, rng, smoothing=c.smoothing, flip=c.flip, crop=c.crop,
                               out_size=self.image_set.out_size, fixed=fixed)

    def loss(self, n: int, x: Tensor, rng, fixed=None):
        """Returns (total, bns, odsl_term, draw)."""
        cfg = self.cfg
        xt, d = self.prep(x, rng, fixed)
        res = self.bundle.network.forward(xt, stop_at_last_bn=not cfg.odsl)
        feats = res.bn_inputs
        if cfg.mode == "global":
            means, seconds = zip(*[batch_stats(f)[:2] for f in feats])
            stats = self.store.aggregate_with_active(n, means, seconds)
            bns = bns_loss(stats, self.targets)
            odsl_scale = 1.0 / cfg.num_images
        else:
            s = cfg.effective_scope
            means, seconds = zip(*[grouped_stats(f, s) for f in feats])
            bns = per_group_bns_loss(means, seconds, self.targets)
            odsl_scale = 1.0 / s
        odsl_term = None
        if cfg.odsl:
            mu_k, sq_k = grouped_stats(feats[-1], 1)
            var_k = variance_from_moments(mu_k, sq_k, "last BN, per image")
            per_image = odsl(res.output, mu_k, var_k, self.targets[-1], self.delta)
            odsl_term = ops.mul(ops.sum(per_image), odsl_scale)
        total = total_loss(bns, odsl_term, cfg.lam if cfg.odsl else 0.0)
        return total, bns, odsl_term, d

    def record(self, n: int, images: np.ndarray, rng, fixed=None):
        xt, _ = self.prep(Tensor(images), rng, fixed)
        res = self.bundle.network.forward(xt, stop_at_last_bn=True)
        return record_from_features(n, res.bn_inputs)


def default_delta(bundle: ModelBundle) -> float:
    last = collect_bn_targets(bundle)[-1]
    return 0.1 * float(np.sum(last.sigma ** 2))


def generate(bundle: ModelBundle, cfg: SynthesisConfig, seed: int = 0,
             image_set: ImageSet | None = None) -> tuple[ImageSet, LossTrace]:
    cfg.validate()
    collect_bn_targets(bundle)  # raises for BN-free models
    image_set = image_set or init_image_set(cfg, bundle.input_spec, seed)
    delta = default_delta(bundle) if cfg.delta is None else cfg.delta
    rng = np.random.default_rng([seed, 1])
    trace = LossTrace()
    if not np.isfinite(image_set.images).all():
        raise SynthesisError(0, "initial image set is not finite")
    trace.initial_full_bns = full_set_bns(bundle, image_set.final_images(cfg.smoothing))
    if cfg.iterations == 0:
        trace.final_full_bns = trace.initial_full_bns
        return image_set, trace

    store = GlobalStatStore(cfg.num_batches) if cfg.mode == "global" else None
    step = _Step(bundle, cfg, image_set, store, delta)
    if store is not None:
        for n in range(cfg.num_batches):
            store.set_record(n, step.record(n, image_set.images[image_set.batch_slice(n)], rng))

    bounds = bundle.input_spec.get("range") if cfg.clip else None
    sched = ReduceLROnPlateau(cfg.lr, cfg.scheduler_factor, cfg.patience())
    lr = cfg.lr
    for t in range(1, cfg.iterations + 1):
        epoch_total = 0.0
        for n in range(cfg.num_batches):
            sl = image_set.batch_slice(n)
            x = Tensor(image_set.images[sl].copy(), requires_grad=True)
            try:
                total, bns, odsl_term, d = step.loss(n, x, rng)
                total.backward()
                new, image_set.states[n] = radam_step(image_set.states[n], image_set.images[sl], x.grad, lr,
                                                      cfg.betas)
            except (NumericError, FloatingPointError) as exc:
                raise SynthesisError(t, str(exc)) from exc
            if bounds is not None:
                np.clip(new, bounds[0], bounds[1], out=new)
            image_set.images[sl] = new
            if store is not None:
                store.replace_record(n, step.record(n, image_set.images[sl], rng,
                                                    d if cfg.reuse_draw else None))
            tv = total.item()
            epoch_total += tv
            trace.rows.append(TraceRow(t, n, bns.item(), odsl_term.item() if odsl_term is not None else 0.0,
                                       tv, lr))
        lr = sched.step(epoch_total / cfg.num_batches)
    trace.final_full_bns = full_set_bns(bundle, image_set.final_images(cfg.smoothing))
    log.info("synthesis done: full-set BNS %.4g -> %.4g", trace.initial_full_bns, trace.final_full_bns)
    return image_set, trace
