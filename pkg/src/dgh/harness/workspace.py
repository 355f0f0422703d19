"""Shared state of one experiment run: model, data splits, image-set cache.

Every random draw is keyed by ``(seed, stream)`` so results do not depend on
the order in which arms are evaluated:

* stream 2: real-data calibration subset
* stream 3: Gaussian-noise calibration images
* streams 20+p: augmentation-MSE pass p

Synthesis uses its own ``(seed, 0)`` / ``(seed, 1)`` streams.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np

from ..quant import QuantScheme, calibrate, evaluate_quantized
from ..synth.generate import SynthesisConfig, generate
from ..zoo.bundle import ModelBundle
from ..zoo.data import LabeledDataset, shapes_splits
from ..zoo.pretrained import load_reference
from ..zoo.serialize import dumps_model, load_model
from .config import ExperimentConfig

log = logging.getLogger(__name__)

REAL_STREAM, NOISE_STREAM, AUGMSE_STREAM = 2, 3, 20


def method_overrides(method: str, k: int | None = None, base_batch: int = 8, num_images: int = 64) -> dict:
    """SynthesisConfig overrides that realise a calibration method."""
    if method == "dgh":
        return {"mode": "global"}
    if method == "bns_only":
        return {"mode": "global", "odsl": False}
    if method == "per_image":
        return {"mode": "per-image"}
    if method == "per_batch":
        k = k or base_batch
        return {"mode": "per-batch", "scope": k, "batch_size": compute_batch(k, base_batch, num_images)}
    raise ValueError(f"{method!r} is not a synthesis method")


def compute_batch(scope: int, base: int, num_images: int) -> int:
    """Images per optimisation step for a statistics scope: the scope itself,
    or the least common multiple with ``base`` when that still divides M.
    Scopes are optimised independently, so batching several per step only
    changes throughput."""
    b = math.lcm(scope, base)
    return b if num_images % b == 0 else scope


class Workspace:
    def __init__(self, cfg: ExperimentConfig, bundle: ModelBundle | None = None):
        self.cfg = cfg
        self.bundle = bundle or self._load_model()
        d = cfg.data
        self.train, self.val = shapes_splits(d["n_train"], d["n_val"], d["seed"])
        if cfg.val_size is not None:
            self.val = self.val.subset(np.arange(min(cfg.val_size, len(self.val))))
        self.cache_dir = Path(cfg.cache_dir) if cfg.cache_dir else None
        self._memo: dict[str, np.ndarray] = {}
        self._model_digest = hashlib.sha256(dumps_model(self.bundle)).hexdigest()[:16]

    def _load_model(self) -> ModelBundle:
        if self.cfg.model == "builtin":
            return load_reference()
        return load_model(self.cfg.model)

    # ------------------------------------------------------------ calibration sources

    @property
    def num_images(self) -> int:
        return int(self.cfg.synthesis.get("num_images", 64))

    def real_images(self, seed: int, n: int | None = None) -> np.ndarray:
        rng = np.random.default_rng([seed, REAL_STREAM])
        return self.train.sample(n or self.num_images, rng).images

    def noise_images(self, seed: int, n: int | None = None) -> np.ndarray:
        c, h, w = self.bundle.input_shape
        rng = np.random.default_rng([seed, NOISE_STREAM])
        return rng.standard_normal((n or self.num_images, c, h, w)).astype(np.float32)

    def synthesize(self, seed: int, **overrides) -> np.ndarray:
        """Calibration view of a generated set, cached by (model, config, seed)."""
        cfg = self.cfg.synthesis_config(**overrides)
        key = self._key(cfg, seed)
        if key in self._memo:
            return self._memo[key]
        path = self.cache_dir / f"{key}.npy" if self.cache_dir else None
        if path is not None and path.exists():
            images = np.load(path)
        else:
            log.info("generating seed=%d %s", seed, json.dumps(overrides, sort_keys=True))
            image_set, _ = generate(self.bundle, cfg, seed)
            images = image_set.final_images(cfg.smoothing)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_name(f".{path.name}.tmp.npy")
                np.save(tmp, images)
                tmp.replace(path)
        self._memo[key] = images
        return images

    def _key(self, cfg: SynthesisConfig, seed: int) -> str:
        blob = json.dumps({"model": self._model_digest, "cfg": cfg.to_dict(), "seed": seed}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def images_for(self, method: str, seed: int, k: int | None = None) -> np.ndarray:
        if method == "real":
            return self.real_images(seed)
        if method == "noise":
            return self.noise_images(seed)
        base = int(self.cfg.synthesis.get("batch_size", 8))
        return self.synthesize(seed, **method_overrides(method, k, base, self.num_images))

    # ------------------------------------------------------------ evaluation

    def accuracy(self, images: np.ndarray, scheme: QuantScheme, val: LabeledDataset | None = None) -> dict:
        params = calibrate(self.bundle, images, scheme)
        return evaluate_quantized(self.bundle, params, scheme, val or self.val)
