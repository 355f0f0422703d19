"""Experiment commands. Each returns a Report and writes its artifacts under ``cfg.output``."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import fields
from itertools import product
from pathlib import Path

import numpy as np

from ..io_utils import atomic_write_text
from ..quant import QuantParams, calibrate, evaluate_quantized
from ..stats import full_set_stats
from ..synth.generate import generate
from ..zoo.bundle import collect_bn_targets
from ..zoo.data import augment_batch, read_tensor_manifest, shapes_splits, write_tensor_manifest
from ..zoo.serialize import save_model
from ..zoo.train import TrainConfig, train_reference_model
from .config import ExperimentConfig
from .report import Report
from .workspace import AUGMSE_STREAM, Workspace, method_overrides

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """An e2e stage failed; ``report`` holds the rows written so far."""

    def __init__(self, stage: str, report: Report, cause: BaseException):
        self.stage = stage
        self.report = report
        super().__init__(f"stage {stage!r} failed: {cause}")


def _out(cfg: ExperimentConfig, *parts) -> Path:
    return Path(cfg.output, *parts)


def _train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    extra = set(cfg.train) - known - {"save"}
    if extra:
        raise ValueError(f"unknown train keys {sorted(extra)}")
    return TrainConfig(**{k: v for k, v in cfg.train.items() if k in known and k != "seed"}, seed=seed)


# ---------------------------------------------------------------- single-stage commands

def cmd_train(cfg: ExperimentConfig, seed: int) -> Report:
    d = cfg.data
    train, val = shapes_splits(d["n_train"], d["n_val"], d["seed"])
    bundle = train_reference_model(cfg.arch, train, _train_config(cfg, seed), val=val)
    path = _out(cfg, f"model_seed{seed}.dghm")
    save_model(bundle, path)
    rep = Report(cfg.hash)
    rep.add(cfg.name, seed, cfg.arch, "float", "val_top1", bundle.metadata["val_accuracy"])
    return rep


def cmd_generate(cfg: ExperimentConfig, ws: Workspace, seed: int) -> Report:
    scfg = cfg.synthesis_config()
    image_set, trace = generate(ws.bundle, scfg, seed)
    d = _out(cfg, f"images_seed{seed}")
    write_tensor_manifest(d, {"images": image_set.images,
                              "calibration": image_set.final_images(scfg.smoothing),
                              "center_cropped": image_set.center_cropped()},
                          meta={"seed": seed, "synthesis": scfg.to_dict(), "out_size": list(image_set.out_size)})
    atomic_write_text(d / "loss_trace.csv", trace.to_csv())
    rep = Report(cfg.hash)
    rep.add(cfg.name, seed, scfg.mode, "float", "full_bns_initial", trace.initial_full_bns)
    rep.add(cfg.name, seed, scfg.mode, "float", "full_bns_final", trace.final_full_bns)
    return rep


def _source_images(cfg: ExperimentConfig, ws: Workspace, seed: int) -> tuple[str, np.ndarray]:
    src = cfg.source or "dgh"
    if Path(src).exists():
        tensors, _, _ = read_tensor_manifest(src)
        return Path(src).name, tensors.get("calibration", tensors.get("images"))
    return src, ws.images_for(src, seed)


def cmd_quantize(cfg: ExperimentConfig, ws: Workspace, seed: int) -> Report:
    name, images = _source_images(cfg, ws, seed)
    rep = Report(cfg.hash)
    for label in cfg.schemes:
        params = calibrate(ws.bundle, images, cfg.scheme(label))
        atomic_write_text(_out(cfg, f"qparams_{label}_{name}_seed{seed}.json"), params.to_json())
        rep.add(cfg.name, seed, name, label, "quantized_tensors", len(params.activations) + len(params.weights))
    return rep


def cmd_evaluate(cfg: ExperimentConfig, ws: Workspace, seed: int) -> Report:
    rep = Report(cfg.hash)
    if cfg.params:
        params = QuantParams.from_json(Path(cfg.params).read_text())
        res = evaluate_quantized(ws.bundle, params, params.scheme, ws.val)
        name = Path(cfg.params).stem
        rep.add(cfg.name, seed, name, params.scheme.label, "top1", res["accuracy"])
        rep.add(cfg.name, seed, name, params.scheme.label, "float_top1", res["float_accuracy"])
        return rep
    name, images = _source_images(cfg, ws, seed)
    for label in cfg.schemes:
        res = ws.accuracy(images, cfg.scheme(label))
        rep.add(cfg.name, seed, name, label, "top1", res["accuracy"])
        rep.add(cfg.name, seed, name, label, "float_top1", res["float_accuracy"])
    return rep


# ---------------------------------------------------------------- trend experiments

def valid_k_values(cfg: ExperimentConfig) -> list[int]:
    m = int(cfg.synthesis.get("num_images", 64))
    ok = []
    for k in cfg.k_values:
        if k < 1 or m % k:
            warnings.warn(f"K={k} does not divide M={m}; skipped", RuntimeWarning, stacklevel=2)
            continue
        ok.append(k)
    return ok


def sweep_arms(cfg: ExperimentConfig) -> list[tuple[str, dict]]:
    """(method label, synthesis overrides) for every arm of the scope sweep."""
    m = int(cfg.synthesis.get("num_images", 64))
    base = int(cfg.synthesis.get("batch_size", 8))
    arms = []
    for k in valid_k_values(cfg):
        for odsl in (True, False):
            ov = method_overrides("per_batch", k, base, m)
            ov["odsl"] = odsl
            arms.append((f"scope{k}_{'odsl' if odsl else 'bns'}", ov))
    arms.append(("global_odsl", {"mode": "global"}))
    arms.append(("global_bns", {"mode": "global", "odsl": False}))
    return arms


def cmd_sweep(cfg: ExperimentConfig, ws: Workspace, seed: int) -> Report:
    rep = Report(cfg.hash)
    for method, ov in sweep_arms(cfg):
        images = ws.synthesize(seed, **ov)
        for label in cfg.schemes:
            rep.add(cfg.name, seed, method, label, "top1", ws.accuracy(images, cfg.scheme(label))["accuracy"])
    return rep


ABLATION_COMPONENTS = ("SAS", "IP", "ODSL")


def ablation_arms(cfg: ExperimentConfig) -> list[tuple[str, dict]]:
    """All 8 on/off combinations of global statistics scope (SAS), image
    preprocessing (IP) and the output stretching loss (ODSL).

    SAS off optimises each step's batch on its own statistics (per-batch
    mode at the configured batch size). IP off drops all preprocessing.
    """
    base = int(cfg.synthesis.get("batch_size", 8))
    arms = []
    for sas, ip, od in product((True, False), repeat=3):
        on = [n for n, flag in zip(ABLATION_COMPONENTS, (sas, ip, od)) if flag]
        ov = {"mode": "global"} if sas else {"mode": "per-batch", "scope": base, "batch_size": base}
        ov["odsl"] = od
        if not ip:
            ov.update(smoothing=False, flip=False, crop=False)
        arms.append(("+".join(on) if on else "none", ov))
    return arms


def cmd_ablate(cfg: ExperimentConfig, ws: Workspace, seed: int) -> Report:
    rep = Report(cfg.hash)
    for method, ov in ablation_arms(cfg):
        images = ws.synthesize(seed, **ov)
        for label in cfg.schemes:
            rep.add(cfg.name, seed, method, label, "top1", ws.accuracy(images, cfg.scheme(label))["accuracy"])
    return rep


def _source(ws: Workspace, name: str, seed: int) -> np.ndarray | None:
    try:
        return ws.images_for(name, seed)
    except (ValueError, FileNotFoundError) as exc:
        warnings.warn(f"source {name!r} unavailable ({exc}); skipped", RuntimeWarning, stacklevel=2)
        return None


def output_histograms(outputs: dict[str, np.ndarray], bins: int):
    """Per-source histograms of output values on one binning over the pooled range.

    Each image contributes total mass 1, spread over its output entries.
    Returns (edges, {source: masses}).
    """
    pooled = np.concatenate([o.reshape(-1) for o in outputs.values()])
    edges = np.linspace(float(pooled.min()), float(pooled.max()), bins + 1)
    hists = {}
    for name, o in outputs.items():
        flat = o.reshape(len(o), -1)
        w = np.full(flat.shape, 1.0 / flat.shape[1])
        hists[name], _ = np.histogram(flat.reshape(-1), bins=edges, weights=w.reshape(-1))
    return edges, hists


def cmd_hist(cfg: ExperimentConfig, ws: Workspace, seed: int) -> Report:
    rep = Report(cfg.hash)
    outputs = {}
    for name in cfg.hist.get("sources", ["real", "bns_only", "dgh"]):
        images = _source(ws, name, seed)
        if images is not None:
            outputs[name] = ws.bundle.network.predict(images)
    if not outputs:
        return rep
    edges, hists = output_histograms(outputs, int(cfg.hist.get("bins", 40)))
    ref = hists.get("real")
    for name, h in hists.items():
        o = outputs[name].reshape(len(outputs[name]), -1)
        rep.add(cfg.name, seed, name, "float", "edge_lo", edges[0])
        rep.add(cfg.name, seed, name, "float", "edge_hi", edges[-1])
        for i, v in enumerate(h):
            rep.add(cfg.name, seed, name, "float", f"bin{i:03d}", v)
        for k, (lo, hi) in enumerate(zip(o.min(axis=1), o.max(axis=1))):
            rep.add(cfg.name, seed, name, "float", f"image{k:04d}_min", lo)
            rep.add(cfg.name, seed, name, "float", f"image{k:04d}_max", hi)
        rep.add(cfg.name, seed, name, "float", "range_mean", float((o.max(axis=1) - o.min(axis=1)).mean()))
        if ref is not None:
            overlap = np.minimum(h / h.sum(), ref / ref.sum()).sum()
            rep.add(cfg.name, seed, name, "float", "overlap_real", overlap)
    return rep


def layer_mse(stats, targets) -> list[float]:
    """Per-layer mean squared gap over the mean and variance entries."""
    out = []
    for (mu, var), t in zip(stats, targets):
        gaps = np.concatenate([mu - t.mu, var - t.sigma])
        out.append(float(np.mean(gaps ** 2)))
    return out


def augmentation_mse(ws: Workspace, seed: int, augmented: bool, passes: int = 5,
                     pass_size: int = 1000) -> list[float]:
    targets = collect_bn_targets(ws.bundle)
    margin = int(ws.bundle.metadata.get("train", {}).get("crop_margin", 4))
    total = np.zeros(len(targets))
    for p in range(passes):
        rng = np.random.default_rng([seed, AUGMSE_STREAM + p])
        images = ws.train.sample(min(pass_size, len(ws.train)), rng).images
        if augmented:
            images = augment_batch(images, rng, margin)
        total += layer_mse(full_set_stats(ws.bundle.network, images, chunk=250), targets)
    return list(total / passes)


def cmd_augmse(cfg: ExperimentConfig, ws: Workspace, seed: int) -> Report:
    rep = Report(cfg.hash)
    passes, size = int(cfg.augmse.get("passes", 5)), int(cfg.augmse.get("pass_size", 1000))
    for arm, flag in (("augmented", True), ("plain", False)):
        for l, v in enumerate(augmentation_mse(ws, seed, flag, passes, size), 1):
            rep.add(cfg.name, seed, arm, "float", f"mse_layer{l}", v)
    return rep


def cmd_embed(cfg: ExperimentConfig, ws: Workspace, seed: int) -> Report:
    rep = Report(cfg.hash)
    feats = {}
    for name in cfg.embed.get("sources", ["real", "dgh", "noise"]):
        images = _source(ws, name, seed)
        if images is None:
            continue
        res = ws.bundle.network.forward(images)
        feats[name] = res.features.data.reshape(len(images), -1)
        write_tensor_manifest(_out(cfg, f"embeddings_seed{seed}", name), {"features": feats[name]},
                              meta={"source": name, "seed": seed})
        rep.add(cfg.name, seed, name, "float", "feature_dim", feats[name].shape[1])
    if "real" in feats:
        centre = feats["real"].mean(axis=0)
        for name, f in feats.items():
            rep.add(cfg.name, seed, name, "float", "centroid_dist_real", float(np.linalg.norm(f.mean(axis=0) - centre)))
    return rep


# ---------------------------------------------------------------- end to end

def cmd_e2e(cfg: ExperimentConfig, seed: int, report_path: Path | None = None,
            bundle=None) -> Report:
    """Train or load, then calibrate and evaluate every baseline and scheme.

    The report is rewritten after every stage, so a failure leaves the rows
    of the completed stages on disk.
    """
    rep = Report(cfg.hash)
    path = report_path or _out(cfg, "e2e.csv")

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:
            rep.write(path)
            raise StageError(name, rep, exc) from exc

    if bundle is None and cfg.train:
        def train_stage():
            r = cmd_train(cfg, seed)
            rep.extend(r)
            rep.write(path)
            from ..zoo.serialize import load_model
            return load_model(_out(cfg, f"model_seed{seed}.dghm"))
        bundle = stage("train", train_stage)
    ws = stage("load", lambda: Workspace(cfg, bundle))
    for method in cfg.baselines:
        images = stage(f"images:{method}", lambda: ws.images_for(method, seed))
        for label in cfg.schemes:
            res = stage(f"evaluate:{method}:{label}", lambda: ws.accuracy(images, cfg.scheme(label)))
            rep.add(cfg.name, seed, method, label, "top1", res["accuracy"])
            rep.add(cfg.name, seed, method, label, "float_top1", res["float_accuracy"])
        rep.write(path)
    return rep


COMMANDS = {
    "generate": cmd_generate, "quantize": cmd_quantize, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
    "ablate": cmd_ablate, "hist": cmd_hist, "augmse": cmd_augmse, "embed": cmd_embed,
}


def dump_config(cfg: ExperimentConfig) -> None:
    atomic_write_text(_out(cfg, "config.json"), json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
