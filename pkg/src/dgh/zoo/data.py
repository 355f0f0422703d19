"""Procedural shapes dataset and the tensor-blob manifest format."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..io_utils import atomic_write_bytes, atomic_write_text

SHAPE_CLASSES = ("disk", "square", "ring", "plus", "cross", "triangle_up", "triangle_down",
                 "diamond", "hbar", "vbar")

# pixel values in [0, 1] are standardized with these before entering the model
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

MANIFEST_FORMAT = "dgh-tensors"
MANIFEST_VERSION = 1


@dataclass
class LabeledDataset:
    images: np.ndarray  # N, C, H, W float32, standardized
    labels: np.ndarray  # N int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be NCHW, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.split, self.num_classes)

    def sample(self, n: int, rng: np.random.Generator) -> "LabeledDataset":
        """Uniform sample without replacement."""
        idx = np.sort(rng.choice(len(self), size=min(n, len(self)), replace=False))
        return self.subset(idx)


def _shape_mask(cls: int, yy: np.ndarray, xx: np.ndarray, r: float) -> np.ndarray:
    ay, ax = np.abs(yy), np.abs(xx)
    t = max(1.5, r * 0.35)
    name = SHAPE_CLASSES[cls]
    if name == "disk":
        return yy ** 2 + xx ** 2 <= r ** 2
    if name == "square":
        return (ay <= r * 0.8) & (ax <= r * 0.8)
    if name == "ring":
        d = np.sqrt(yy ** 2 + xx ** 2)
        return (d <= r) & (d >= r - t)
    if name == "plus":
        return ((ay <= t / 2) & (ax <= r)) | ((ax <= t / 2) & (ay <= r))
    if name == "cross":
        return ((np.abs(yy - xx) <= t / 1.4) | (np.abs(yy + xx) <= t / 1.4)) & (ay <= r * 0.8) & (ax <= r * 0.8)
    if name == "triangle_up":
        return (yy <= r * 0.7) & (yy >= -r) & (ax <= (yy + r) * 0.6)
    if name == "triangle_down":
        return (yy >= -r * 0.7) & (yy <= r) & (ax <= (r - yy) * 0.6)
    if name == "diamond":
        return ay + ax <= r
    if name == "hbar":
        return (ay <= t * 0.8) & (ax <= r)
    if name == "vbar":
        return (ax <= t * 0.8) & (ay <= r)
    raise ValueError(cls)


def make_shapes(n: int, seed: int = 0, size: int = 32, split: str = "train") -> LabeledDataset:
    """Colored mirror-symmetric shapes on noisy gradient backgrounds.

    Every class is invariant to horizontal flips, so flip augmentation does
    not change labels.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(SHAPE_CLASSES), size=n)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    grid = np.arange(size, dtype=np.float64)
    for k in range(n):
        bg = rng.uniform(0.0, 1.0, 3)
        fg = np.clip(1.0 - bg + rng.normal(0, 0.15, 3), 0, 1)
        slope = rng.normal(0, 0.25, 2)
        ramp = slope[0] * (grid[:, None] / size - 0.5) + slope[1] * (grid[None, :] / size - 0.5)
        img = bg[:, None, None] + ramp[None]
        r = rng.uniform(6.0, 11.0)
        cy, cx = size / 2 + rng.uniform(-5, 5, 2)
        mask = _shape_mask(labels[k], grid[:, None] - cy, grid[None, :] - cx, r)
        img = np.where(mask[None], fg[:, None, None], img)
        img = img + rng.normal(0, 0.06, img.shape)
        images[k] = (np.clip(img, 0, 1) - PIXEL_MEAN) / PIXEL_STD
    return LabeledDataset(images, labels, split, len(SHAPE_CLASSES))


def shapes_splits(n_train: int = 4000, n_val: int = 1000, seed: int = 0):
    return (make_shapes(n_train, seed=seed, split="train"),
            make_shapes(n_val, seed=seed + 7919, split="val"))


def input_spec(channels: int = 3, height: int = 32, width: int = 32) -> dict:
    return {"channels": channels, "height": height, "width": width,
            "range": [(0 - PIXEL_MEAN) / PIXEL_STD, (1 - PIXEL_MEAN) / PIXEL_STD]}


def augment_batch(images: np.ndarray, rng: np.random.Generator, margin: int) -> np.ndarray:
    """Training augmentation: random horizontal flip (p=0.5), then zero-pad by
    ``margin // 2`` on every side and randomly crop back to the input size."""
    n, c, h, w = images.shape
    out = images.copy()
    flip = rng.random(n) < 0.5
    out[flip] = out[flip][..., ::-1]
    if margin:
        p = margin // 2
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        offs = rng.integers(0, margin + 1, size=(n, 2))
        for k, (oy, ox) in enumerate(offs):
            out[k] = padded[k, :, oy:oy + h, ox:ox + w]
    return out


# ---------------------------------------------------------------- manifest I/O

def write_tensor_manifest(directory, tensors: dict[str, np.ndarray], labels: np.ndarray | None = None,
                          meta: dict | None = None) -> Path:
    """Write float32 little-endian NCHW blobs plus optional int32 labels and a
    JSON manifest. Returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in tensors.items():
        fname = f"{name}.f32"
        atomic_write_bytes(directory / fname, np.ascontiguousarray(arr, dtype="<f4").tobytes())
        entries.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": "float32"})
    manifest = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "tensors": entries,
                "meta": meta or {}}
    if labels is not None:
        atomic_write_bytes(directory / "labels.i32", np.asarray(labels, dtype="<i4").tobytes())
        manifest["labels"] = {"file": "labels.i32", "count": int(len(labels)), "dtype": "int32"}
    path = directory / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_tensor_manifest(path) -> tuple[dict[str, np.ndarray], np.ndarray | None, dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: manifest version {manifest.get('version')} (supported {MANIFEST_VERSION})")
    root = path.parent
    tensors = {}
    for e in manifest["tensors"]:
        raw = np.fromfile(os.fspath(root / e["file"]), dtype="<f4")
        if raw.size != int(np.prod(e["shape"])):
            raise ValueError(f"{e['file']}: expected {np.prod(e['shape'])} values, found {raw.size}")
        tensors[e["name"]] = raw.reshape(e["shape"]).astype(np.float32)
    labels = None
    if "labels" in manifest:
        labels = np.fromfile(os.fspath(root / manifest["labels"]["file"]), dtype="<i4").astype(np.int64)
    return tensors, labels, manifest.get("meta", {})


def save_dataset(ds: LabeledDataset, directory) -> Path:
    return write_tensor_manifest(directory, {"images": ds.images}, ds.labels,
                                 {"split": ds.split, "num_classes": ds.num_classes})


def load_dataset(path) -> LabeledDataset:
    tensors, labels, meta = read_tensor_manifest(path)
    if labels is None:
        raise ValueError(f"{path}: manifest carries no labels")
    return LabeledDataset(tensors["images"], labels, meta.get("split", "train"),
                          int(meta.get("num_classes", int(labels.max()) + 1)))
