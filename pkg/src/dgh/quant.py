"""Post-training fake quantization with min/max calibration.

BN nodes are folded into their producing convolutions first, as a deployed
integer model would. Weights are quantized symmetrically (per output channel
by default) with round-to-nearest. Activations are observed on a calibration
set and quantized at every layer output.

Coverage policies:

``hardware_friendly``
    every weight and activation at the scheme's bit-widths, including the
    network input and the output head.
``academic``
    first and last layers' weights and the input to the second layer at
    8 bits; the model output stays in float.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Tensor
from .zoo.bundle import ModelBundle
from .zoo.network import Network, Node

PASSTHROUGH_BITS = 32


class CoverageError(KeyError):
    def __init__(self, tensor: str):
        self.tensor = tensor
        super().__init__(f"no quantization parameters for covered tensor {tensor!r}")


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantScheme:
    weight_bits: int = 8
    activation_bits: int = 8
    threshold_mode: str = "power_of_two"  # or "minmax"
    granularity: str = "per_channel"  # weights: or "per_tensor"
    coverage: str = "hardware_friendly"  # or "academic"

    def __post_init__(self):
        for b in (self.weight_bits, self.activation_bits):
            if b != PASSTHROUGH_BITS and not 2 <= b <= 8:
                raise ValueError(f"bit-width {b} outside [2, 8]")
        if self.threshold_mode not in ("minmax", "power_of_two"):
            raise ValueError(f"unknown threshold mode {self.threshold_mode!r}")
        if self.granularity not in ("per_channel", "per_tensor"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.coverage not in ("hardware_friendly", "academic"):
            raise ValueError(f"unknown coverage {self.coverage!r}")

    @property
    def passthrough(self) -> bool:
        return self.weight_bits == PASSTHROUGH_BITS and self.activation_bits == PASSTHROUGH_BITS

    @property
    def label(self) -> str:
        return f"W{self.weight_bits}A{self.activation_bits}"

    @classmethod
    def parse(cls, text: str, **kwargs) -> "QuantScheme":
        m = re.fullmatch(r"[Ww](\d+)[Aa](\d+)", text.strip())
        if not m:
            raise ValueError(f"scheme string {text!r} is not of the form W<bits>A<bits>")
        return cls(int(m.group(1)), int(m.group(2)), **kwargs)


@dataclass
class QuantParam:
    """Uniform grid: ``x -> (clip(round(x / scale) + zero_point, qmin, qmax) - zero_point) * scale``.

    ``scale`` and ``zero_point`` are scalars or per-channel vectors along
    ``axis``; ``threshold`` is the symmetric range limit when one exists.
    """

    name: str
    bits: int
    mode: str
    scale: np.ndarray
    zero_point: np.ndarray
    qmin: int
    qmax: int
    axis: int | None = None
    threshold: np.ndarray | None = None

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.zero_point = np.asarray(self.zero_point, dtype=np.float64)
        if self.threshold is not None:
            self.threshold = np.asarray(self.threshold, dtype=np.float64)
        if (self.scale <= 0).any():
            raise ValueError(f"{self.name}: non-positive scale")

    def to_json(self) -> dict:
        return {"tensor": self.name, "bits": self.bits, "mode": self.mode,
                "scale": np.atleast_1d(self.scale).tolist(),
                "zero_point": np.atleast_1d(self.zero_point).tolist(),
                "threshold": None if self.threshold is None else np.atleast_1d(self.threshold).tolist(),
                "qmin": self.qmin, "qmax": self.qmax, "axis": self.axis}

    @classmethod
    def from_json(cls, d: dict) -> "QuantParam":
        def arr(v):
            a = np.asarray(v, dtype=np.float64)
            return a.reshape(()) if d["axis"] is None and a.size == 1 else a
        return cls(d["tensor"], int(d["bits"]), d["mode"], arr(d["scale"]), arr(d["zero_point"]),
                   int(d["qmin"]), int(d["qmax"]), d["axis"],
                   None if d["threshold"] is None else arr(d["threshold"]))


@dataclass
class QuantParams:
    weights: dict[str, QuantParam] = field(default_factory=dict)
    activations: dict[str, QuantParam] = field(default_factory=dict)
    observed: dict[str, tuple[float, float]] = field(default_factory=dict)
    scheme: QuantScheme | None = None

    def to_json(self) -> str:
        payload = {"scheme": asdict(self.scheme) if self.scheme else None,
                   "weights": [p.to_json() for p in self.weights.values()],
                   "activations": [p.to_json() for p in self.activations.values()]}
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QuantParams":
        d = json.loads(text)
        scheme = QuantScheme(**d["scheme"]) if d.get("scheme") else None
        weights = {p["tensor"]: QuantParam.from_json(p) for p in d["weights"]}
        acts = {p["tensor"]: QuantParam.from_json(p) for p in d["activations"]}
        return cls(weights, acts, {}, scheme)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def pow2_ceil(t):
    """Smallest power of two >= t (elementwise, t > 0)."""
    t = np.asarray(t, dtype=np.float64)
    return np.exp2(np.ceil(np.log2(t)))


def quantize_dequantize(t, p: QuantParam):
    """Fake-quantize an array (or Tensor data) on ``p``'s grid."""
    x = t.data if isinstance(t, Tensor) else np.asarray(t)
    scale, zp = p.scale, p.zero_point
    if p.axis is not None and scale.ndim:
        shape = [1] * x.ndim
        shape[p.axis] = -1
        scale, zp = scale.reshape(shape), zp.reshape(shape)
    xd = x.astype(np.float64)
    lo, hi = (p.qmin - zp) * scale, (p.qmax - zp) * scale
    q = round_half_away(np.clip(xd, lo, hi) / scale) + zp
    q = np.clip(q, p.qmin, p.qmax)
    return ((q - zp) * scale).astype(x.dtype)


def _tiny(t):
    return np.maximum(t, 1e-12)


def activation_param(name: str, lo: float, hi: float, bits: int, mode: str) -> QuantParam:
    if mode == "power_of_two":
        t = float(pow2_ceil(_tiny(max(abs(lo), abs(hi)))))
        if lo >= 0:
            return QuantParam(name, bits, mode, t / 2 ** bits, 0.0, 0, 2 ** bits - 1, threshold=t)
        return QuantParam(name, bits, mode, t / 2 ** (bits - 1), 0.0, -2 ** (bits - 1), 2 ** (bits - 1) - 1,
                          threshold=t)
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = max(hi - lo, 1e-12) / (2 ** bits - 1)
    zp = float(round_half_away(np.asarray(-lo / scale)))
    return QuantParam(name, bits, mode, scale, zp, 0, 2 ** bits - 1)


def weight_param(name: str, w: np.ndarray, bits: int, mode: str, per_channel: bool) -> QuantParam:
    axis = 0 if per_channel else None
    amax = np.abs(w).reshape(w.shape[0], -1).max(axis=1) if per_channel else np.abs(w).max()
    amax = _tiny(amax)
    if mode == "power_of_two":
        t = pow2_ceil(amax)
        return QuantParam(name, bits, mode, t / 2 ** (bits - 1), np.zeros_like(t), -2 ** (bits - 1),
                          2 ** (bits - 1) - 1, axis, threshold=t)
    return QuantParam(name, bits, mode, amax / (2 ** (bits - 1) - 1), np.zeros_like(amax),
                      -(2 ** (bits - 1) - 1), 2 ** (bits - 1) - 1, axis, threshold=amax)


# ---------------------------------------------------------------- graph preparation

def fold_batchnorm(net: Network) -> Network:
    """Merge every conv -> BN pair whose conv feeds only that BN."""
    folded = net.copy()
    keep: list[Node] = []
    renames: dict[str, str] = {}
    for node in folded.nodes:
        node.inputs = [renames.get(i, i) for i in node.inputs]
        if node.op == "bn":
            src = next(n for n in keep if n.name == node.inputs[0])
            if src.op == "conv" and len(net.consumers(src.name)) == 1:
                inv = 1.0 / np.sqrt(node.params["var"].astype(np.float64) + net.bn_eps)
                g = node.params["gamma"].astype(np.float64) * inv
                w = src.params["weight"].astype(np.float64) * g[:, None, None, None]
                b = src.params.get("bias", np.zeros(g.shape)).astype(np.float64)
                b = (b - node.params["mean"]) * g + node.params["beta"]
                src.params = {"weight": w.astype(np.float32), "bias": b.astype(np.float32)}
                renames[node.name] = src.name
                continue
        keep.append(node)
    output = renames.get(net.output, net.output)
    features = renames.get(net.features, net.features) if net.features else None
    return Network(keep, output, features, net.bn_eps)


def activation_points(net: Network) -> list[str]:
    """Nodes of a folded graph whose outputs are quantized.

    A node feeding only a ReLU is fused with it; flatten only reshapes.
    """
    points = []
    for node in net.nodes:
        if node.op == "flatten":
            continue
        cons = net.consumers(node.name)
        if node.op in ("conv", "add", "linear") and len(cons) == 1 and cons[0].op == "relu" \
                and node.name != net.output:
            continue
        points.append(node.name)
    return points


def _weighted_nodes(net: Network) -> list[Node]:
    return [n for n in net.nodes if n.op in ("conv", "linear")]


def _bits_for(scheme: QuantScheme, net: Network) -> tuple[dict[str, int], dict[str, int | None]]:
    """Per-tensor bit-widths under the coverage policy; None leaves a tensor in float."""
    weighted = _weighted_nodes(net)
    wbits = {n.name: scheme.weight_bits for n in weighted}
    abits: dict[str, int | None] = {p: scheme.activation_bits for p in activation_points(net)}
    if scheme.coverage == "academic":
        wbits[weighted[0].name] = 8
        wbits[weighted[-1].name] = 8
        abits["input"] = 8
        # output of the first layer is the input to the second
        first_out = weighted[0].name
        cons = net.consumers(first_out)
        if first_out not in abits and cons and cons[0].op == "relu":
            first_out = cons[0].name
        abits[first_out] = 8
        abits[net.output] = None
    return wbits, abits


# ---------------------------------------------------------------- calibration / evaluation

def _images_of(calib) -> np.ndarray:
    if hasattr(calib, "final_images"):
        return calib.final_images()
    if hasattr(calib, "images"):
        return calib.images
    return np.asarray(calib)


def calibrate(bundle: ModelBundle, calib_images, scheme: QuantScheme, batch_size: int = 128) -> QuantParams:
    """Observe activation ranges over the calibration images and derive grids.

    ``calib_images`` may be an ImageSet (its calibration view is used), a
    LabeledDataset, or an N x C x H x W array.
    """
    images = _images_of(calib_images)
    if len(images) == 0:
        raise CalibrationError("empty calibration set")
    params = QuantParams(scheme=scheme)
    if scheme.passthrough:
        return params
    net = fold_batchnorm(bundle.network)
    wbits, abits = _bits_for(scheme, net)
    ranges: dict[str, list[float]] = {}

    def observe(node: Node, y: Tensor) -> Tensor:
        if node.name in abits:
            lo, hi = float(y.data.min()), float(y.data.max())
            r = ranges.setdefault(node.name, [math.inf, -math.inf])
            r[0], r[1] = min(r[0], lo), max(r[1], hi)
        return y

    for i in range(0, len(images), batch_size):
        net.forward(images[i:i + batch_size], hook=observe)
    for name, (lo, hi) in ranges.items():
        params.observed[name] = (lo, hi)
        bits = abits[name]
        if bits is not None and bits != PASSTHROUGH_BITS:
            params.activations[name] = activation_param(name, lo, hi, bits, scheme.threshold_mode)
    for node in _weighted_nodes(net):
        bits = wbits[node.name]
        if bits != PASSTHROUGH_BITS:
            params.weights[node.name] = weight_param(node.name, node.params["weight"], bits, scheme.threshold_mode,
                                                     scheme.granularity == "per_channel")
    return params


def quantized_network(bundle: ModelBundle, params: QuantParams, scheme: QuantScheme):
    """Folded network with fake-quantized weights plus the activation hook."""
    net = fold_batchnorm(bundle.network)
    wbits, abits = _bits_for(scheme, net)
    for node in _weighted_nodes(net):
        if wbits[node.name] == PASSTHROUGH_BITS:
            continue
        if node.name not in params.weights:
            raise CoverageError(f"{node.name}.weight")
        node.params["weight"] = quantize_dequantize(node.params["weight"], params.weights[node.name])
    for name, bits in abits.items():
        if bits is not None and bits != PASSTHROUGH_BITS and name not in params.activations:
            raise CoverageError(name)

    def hook(node: Node, y: Tensor) -> Tensor:
        p = params.activations.get(node.name)
        if p is None:
            return y
        return Tensor(quantize_dequantize(y.data, p))

    return net, hook


def quantized_logits(bundle: ModelBundle, params: QuantParams, scheme: QuantScheme, images: np.ndarray,
                     batch_size: int = 250) -> np.ndarray:
    if scheme.passthrough:
        return bundle.network.predict(images, batch_size)
    net, hook = quantized_network(bundle, params, scheme)
    return np.concatenate([net.forward(images[i:i + batch_size], hook=hook).output.data
                           for i in range(0, len(images), batch_size)])


def evaluate_quantized(bundle: ModelBundle, params: QuantParams, scheme: QuantScheme, val) -> dict:
    """Top-1 of the fake-quantized model and of the float model on ``val``."""
    q = quantized_logits(bundle, params, scheme, val.images)
    f = bundle.network.predict(val.images)
    acc = float((q.argmax(axis=1) == val.labels).mean())
    fa = float((f.argmax(axis=1) == val.labels).mean())
    return {"accuracy": acc, "float_accuracy": fa, "gap": fa - acc}
