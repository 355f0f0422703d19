"""Model container format.

Layout::

    b"DGHM" | u32 header length | JSON header (utf-8) | weight blobs | u32 CRC32

The header holds the format version, architecture id, layer table, BN eps,
EMA momentum, input spec and metadata (including validation accuracy). Each
layer-table parameter entry records (offset, shape) into the blob section.
Blobs are little-endian float32 in header order. The trailing CRC32 covers
every preceding byte.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..io_utils import atomic_write_bytes
from .bundle import ModelBundle
from .network import Network, Node

MAGIC = b"DGHM"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class ChecksumError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    def __init__(self, found: int, supported: int):
        self.found = found
        self.supported = supported
        super().__init__(f"model file format version {found} is not supported (this build reads {supported})")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps_model(bundle: ModelBundle, version: int = FORMAT_VERSION) -> bytes:
    net = bundle.network
    layers = []
    blobs = []
    offset = 0
    for node in net.nodes:
        params = []
        for key in sorted(node.params):
            arr = np.ascontiguousarray(node.params[key], dtype="<f4")
            params.append({"key": key, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        layers.append({"name": node.name, "op": node.op, "inputs": node.inputs,
                       "attrs": node.attrs, "params": params})
    header = {
        "format_version": version,
        "architecture": bundle.arch,
        "layers": layers,
        "output": net.output,
        "features": net.features,
        "bn_eps": net.bn_eps,
        "ema_momentum": bundle.metadata.get("bn_momentum"),
        "input_spec": bundle.input_spec,
        "val_accuracy": bundle.metadata.get("val_accuracy"),
        "metadata": bundle.metadata,
    }
    hbytes = json.dumps(_jsonable(header), sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads_model(raw: bytes) -> ModelBundle:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("model file checksum mismatch (truncated or corrupted)")
    (hlen,) = struct.unpack("<I", body[4:8])
    try:
        header = json.loads(body[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(version, FORMAT_VERSION)
    blob = body[8 + hlen:]
    nodes = []
    for layer in header["layers"]:
        params = {}
        for p in layer["params"]:
            count = int(np.prod(p["shape"]))
            start, stop = p["offset"], p["offset"] + 4 * count
            if stop > len(blob):
                raise ModelFormatError(f"parameter {layer['name']}.{p['key']} runs past the blob section")
            params[p["key"]] = np.frombuffer(blob[start:stop], dtype="<f4").reshape(p["shape"]).astype(np.float32)
        nodes.append(Node(layer["name"], layer["op"], list(layer["inputs"]), dict(layer["attrs"]), params))
    net = Network(nodes, header["output"], header.get("features"), header["bn_eps"])
    return ModelBundle(net, header["architecture"], header["input_spec"], header.get("metadata", {}))


def save_model(bundle: ModelBundle, path) -> None:
    atomic_write_bytes(path, dumps_model(bundle))


def load_model(path) -> ModelBundle:
    return loads_model(Path(path).read_bytes())
