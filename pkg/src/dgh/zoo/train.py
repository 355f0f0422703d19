"""Desk-scale training of the reference networks.

BN running statistics follow an exponential moving average,
``running = (1 - momentum) * running + momentum * batch``, with the biased
batch variance, so the stored targets are directly comparable with the
population variance used by the synthesis loss.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..core import NumericError, Tensor, ops
from . import archs
from .bundle import ModelBundle
from .data import LabeledDataset, augment_batch, input_spec

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


@dataclass
class TrainConfig:
    epochs: int = 12
    lr: float = 0.08
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    augment: bool = True
    crop_margin: int = 4
    bn_momentum: float = 0.1
    seed: int = 0
    max_steps: int | None = None  # stop early after this many SGD steps


def evaluate_float(bundle: ModelBundle, ds: LabeledDataset, batch_size: int = 250) -> float:
    logits = bundle.network.predict(ds.images, batch_size)
    return float((logits.argmax(axis=1) == ds.labels).mean())


def train_reference_model(arch: str, data: LabeledDataset, cfg: TrainConfig | None = None,
                          val: LabeledDataset | None = None, **arch_kwargs) -> ModelBundle:
    cfg = cfg or TrainConfig()
    if data.num_classes < 2 or len(np.unique(data.labels)) < 2:
        raise ValueError("training needs at least two classes")
    rng = np.random.default_rng(cfg.seed)
    net = archs.build(arch, num_classes=data.num_classes, seed=cfg.seed, **arch_kwargs)
    bn_names = [n.name for n in net.bn_nodes]

    trainable = {}
    for node in net.nodes:
        for key, arr in node.params.items():
            if key in ("mean", "var"):
                continue
            trainable[f"{node.name}.{key}"] = arr
    velocity = {k: np.zeros_like(v) for k, v in trainable.items()}

    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        running_loss = 0.0
        for b in range(steps_per_epoch):
            if step >= total_steps:
                break
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x = data.images[idx]
            if cfg.augment:
                x = augment_batch(x, rng, cfg.crop_margin)
            params = {k: Tensor(v, requires_grad=True) for k, v in trainable.items()}
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    res = net.forward(Tensor(x), train=True, params=params)
                    loss = ops.softmax_cross_entropy(res.output, data.labels[idx])
            except NumericError as exc:
                raise TrainingError(epoch, f"diverged ({exc})") from exc
            lv = loss.item()
            if not np.isfinite(lv):
                raise TrainingError(epoch, "loss is not finite")
            loss.backward()
            lr = 0.5 * cfg.lr * (1 + math.cos(math.pi * step / total_steps))
            for k, t in params.items():
                g = t.grad if t.grad is not None else 0.0
                if not k.endswith((".beta", ".bias")):
                    g = g + cfg.weight_decay * trainable[k]
                velocity[k] = cfg.momentum * velocity[k] + g
                trainable[k] -= (lr * velocity[k]).astype(np.float32)
            for name, (bm, bv) in zip(bn_names, res.batch_stats):
                node = net.node(name)
                m = cfg.bn_momentum
                node.params["mean"] = ((1 - m) * node.params["mean"] + m * bm).astype(np.float32)
                node.params["var"] = ((1 - m) * node.params["var"] + m * bv).astype(np.float32)
            running_loss += lv
            step += 1
        log.info("epoch %d loss %.4f", epoch, running_loss / max(1, steps_per_epoch))
        if step >= total_steps:
            break

    bundle = ModelBundle(net, arch, input_spec(*data.images.shape[1:]),
                         {"train": asdict(cfg), "bn_momentum": cfg.bn_momentum, "steps": step})
    if val is not None:
        bundle.metadata["val_accuracy"] = evaluate_float(bundle, val)
    return bundle
