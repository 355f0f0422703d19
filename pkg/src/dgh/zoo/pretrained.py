"""The reference model shipped with the package.

``tiny_resnet_shapes.dghm`` is tiny-resnet trained on the default shapes
split (4000 train / 1000 val, seed 0) with the default :class:`TrainConfig`.
``python -m dgh.zoo.pretrained`` rebuilds it bit-for-bit.
"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from .bundle import ModelBundle
from .data import shapes_splits
from .serialize import load_model, save_model
from .train import TrainConfig, train_reference_model

ASSET = Path(__file__).resolve().parent.parent / "assets" / "tiny_resnet_shapes.dghm"
N_TRAIN, N_VAL, DATA_SEED = 4000, 1000, 0


def reference_splits():
    return shapes_splits(N_TRAIN, N_VAL, DATA_SEED)


def build_reference(cfg: TrainConfig | None = None) -> ModelBundle:
    train, val = reference_splits()
    bundle = train_reference_model("tiny-resnet", train, cfg or TrainConfig(), val=val)
    bundle.metadata["dataset"] = {"name": "shapes", "n_train": N_TRAIN, "n_val": N_VAL, "seed": DATA_SEED}
    return bundle


def load_reference() -> ModelBundle:
    if not ASSET.exists():
        raise FileNotFoundError(f"{ASSET} missing; rebuild with `python -m dgh.zoo.pretrained`")
    return load_model(ASSET)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="Rebuild the shipped reference model.")
    ap.add_argument("--out", type=Path, default=ASSET)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    bundle = build_reference()
    save_model(bundle, args.out)
    print(f"wrote {args.out} (val accuracy {bundle.metadata['val_accuracy']:.4f})")


if __name__ == "__main__":
    main()
