"""Synthesis-time preprocessing: smoothing, random flip, random crop.

All three steps are index maps or a fixed convolution, so gradients pass
straight back to the raw image pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Tensor, ops

# binomial approximation of a 3x3 Gaussian
SMOOTH_KERNEL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


def crop_margin_for(height: int, base: int = 32, base_size: int = 224) -> int:
    """Canvas margin scaled from ``base`` px at ``base_size`` resolution, rounded to even."""
    return int(2 * round(base * height / base_size / 2))


@dataclass
class PrepDraw:
    flip: np.ndarray  # bool per image
    offsets: np.ndarray  # (K, 2) crop origins


def smooth(x: Tensor) -> Tensor:
    return ops.depthwise_filter3x3(ops.pad_reflect(x, 1), SMOOTH_KERNEL)


def draw(rng: np.random.Generator | None, n: int, margin: int, do_flip: bool = True,
         do_crop: bool = True) -> PrepDraw:
    flip = rng.random(n) < 0.5 if do_flip else np.zeros(n, dtype=bool)
    if do_crop and margin:
        offsets = rng.integers(0, margin + 1, size=(n, 2))
    else:
        offsets = np.full((n, 2), margin // 2)
    return PrepDraw(flip, offsets)


def preprocess(batch: Tensor, rng: np.random.Generator | None, *, smoothing: bool = True, flip: bool = True,
               crop: bool = True, out_size: tuple[int, int] | None = None,
               fixed: PrepDraw | None = None) -> tuple[Tensor, PrepDraw]:
    """Smooth, flip with p=0.5, then crop the canvas to ``out_size``.

    ``out_size`` defaults to the input size (no crop). Passing ``fixed``
    replays an earlier draw instead of consuming ``rng``.
    """
    n, _, h, w = batch.shape
    oh, ow = out_size or (h, w)
    margin = h - oh
    if margin < 0 or (w - ow) != margin:
        raise ValueError(f"crop margin must be non-negative and equal on both axes; canvas {h}x{w}, output {oh}x{ow}")
    if fixed is None:
        if rng is None and (flip or (crop and margin)):
            raise ValueError("random preprocessing needs an rng")
        fixed = draw(rng, n, margin, flip, crop)
    x = smooth(batch) if smoothing else batch
    if fixed.flip.any():
        x = ops.flip_horizontal(x, fixed.flip)
    if margin:
        x = ops.crop(x, fixed.offsets, (oh, ow))
    return x, fixed


def center_crop(images: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    h, w = images.shape[2:]
    oy, ox = (h - out_size[0]) // 2, (w - out_size[1]) // 2
    return np.ascontiguousarray(images[:, :, oy:oy + out_size[0], ox:ox + out_size[1]])


def eval_view(images: np.ndarray, out_size: tuple[int, int], smoothing: bool = True) -> np.ndarray:
    """Deterministic view of raw canvases: the fixed smoothing filter plus a center crop."""
    x = smooth(Tensor(images)).data if smoothing else images
    return center_crop(x, out_size)
