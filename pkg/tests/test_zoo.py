import json
import struct
import zlib

import numpy as np
import pytest

from dgh.zoo import archs
from dgh.zoo.bundle import ModelBundle, collect_bn_targets
from dgh.zoo.data import (SHAPE_CLASSES, LabeledDataset, load_dataset, make_shapes, read_tensor_manifest,
                          save_dataset, write_tensor_manifest)
from dgh.zoo.network import UnsupportedModelError
from dgh.zoo.serialize import (ChecksumError, ModelFormatError, VersionError, dumps_model, load_model,
                               loads_model, save_model)
from dgh.zoo.train import TrainConfig, TrainingError, train_reference_model

from .oracles import rel_err, two_pass_channel_stats
from .toys import toy_bundle


@pytest.fixture(scope="module")
def small_data():
    return make_shapes(48, seed=3)


def test_shapes_dataset_invariants():
    ds = make_shapes(200, seed=1)
    assert ds.images.shape == (200, 3, 32, 32) and ds.images.dtype == np.float32
    assert ds.labels.min() >= 0 and ds.labels.max() < len(SHAPE_CLASSES)
    lo, hi = (0 - 0.5) / 0.25, (1 - 0.5) / 0.25
    assert ds.images.min() >= lo and ds.images.max() <= hi
    np.testing.assert_array_equal(make_shapes(200, seed=1).images, ds.images)
    assert len(np.unique(ds.labels)) == len(SHAPE_CLASSES)


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 3, 4, 4), np.float32), np.array([0, 10]), "train", 10)


def test_dataset_manifest_roundtrip(tmp_path):
    ds = make_shapes(7, seed=2)
    save_dataset(ds, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    tensors, labels, meta = read_tensor_manifest(tmp_path / "ds")
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert manifest["format"] == "dgh-tensors"
    assert manifest["tensors"][0]["shape"] == [7, 3, 32, 32]
    assert (tmp_path / "ds" / "images.f32").stat().st_size == ds.images.size * 4
    assert meta["split"] == ds.split


def test_unlabeled_manifest(tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 3, 4, 4)).astype(np.float32)
    write_tensor_manifest(tmp_path / "set", {"images": x})
    tensors, labels, _ = read_tensor_manifest(tmp_path / "set")
    assert labels is None
    np.testing.assert_array_equal(tensors["images"], x)


def test_bn_target_collection_structure():
    bundle = toy_bundle(widths=(4, 6, 16))
    targets = collect_bn_targets(bundle)
    assert [t.layer_index for t in targets] == [1, 2, 3]
    assert [t.channels for t in targets] == [4, 6, 16]
    assert targets[2].mu.shape == targets[2].sigma.shape == (16,)
    assert bundle.last_bn_index == 3 == bundle.num_bn
    for t, node in zip(targets, bundle.network.bn_nodes):
        np.testing.assert_array_equal(t.mu, node.params["mean"])
        np.testing.assert_array_equal(t.sigma, node.params["var"])
        assert (t.sigma >= 0).all()


def test_bn_free_model_rejected():
    with pytest.raises(UnsupportedModelError):
        collect_bn_targets(toy_bundle(widths=()))


@pytest.mark.parametrize("arch,count", [("tiny-resnet", 8), ("tiny-vgg", 4)])
def test_reference_architectures(arch, count):
    net = archs.build(arch, seed=0)
    assert len(net.bn_nodes) == count
    out = net.forward(np.zeros((2, 3, 32, 32), np.float32))
    assert out.output.shape == (2, 10)
    # tail after the last BN carries no BN
    last_bn = max(i for i, n in enumerate(net.nodes) if n.op == "bn")
    assert all(n.op != "bn" for n in net.nodes[last_bn + 1:])
    with pytest.raises(ValueError):
        archs.build("resnet50")


def test_one_step_with_unit_momentum_stores_batch_statistics(small_data):
    cfg = TrainConfig(epochs=1, batch_size=len(small_data), augment=False, bn_momentum=1.0, max_steps=1)
    bundle = train_reference_model("tiny-resnet", small_data, cfg)
    # replay the pre-update forward in inference mode: with running stats equal to the
    # batch stats, inference BN reproduces training BN, so the BN inputs must match the targets
    fresh = archs.build("tiny-resnet", seed=cfg.seed)
    for node, trained in zip(fresh.bn_nodes, bundle.network.bn_nodes):
        node.params["mean"] = trained.params["mean"]
        node.params["var"] = trained.params["var"]
    res = fresh.forward(small_data.images, stop_at_last_bn=True)
    for f, t in zip(res.bn_inputs, bundle.bn_targets):
        m, _, v = two_pass_channel_stats(f.data)
        assert rel_err(t.mu, m, floor=1e-3).max() < 1e-4
        assert rel_err(t.sigma, v, floor=1e-3).max() < 1e-4


def test_training_is_deterministic(small_data):
    cfg = TrainConfig(epochs=1, batch_size=16, max_steps=2)
    a = train_reference_model("tiny-vgg", small_data, cfg)
    b = train_reference_model("tiny-vgg", small_data, cfg)
    assert dumps_model(a) == dumps_model(b)


def test_training_needs_two_classes():
    ds = make_shapes(10, seed=0)
    one = LabeledDataset(ds.images, np.zeros(10, np.int64), "train", 10)
    with pytest.raises(ValueError):
        train_reference_model("tiny-vgg", one, TrainConfig(max_steps=1))


def test_divergence_reports_epoch(small_data):
    with pytest.raises(TrainingError) as err:
        train_reference_model("tiny-vgg", small_data, TrainConfig(epochs=3, lr=1e12, batch_size=16))
    assert err.value.epoch in (0, 1, 2)


def _bundle_for_io():
    b = toy_bundle(seed=4)
    b.metadata = {"val_accuracy": 0.5, "bn_momentum": 0.1, "note": "x"}
    return b


def test_model_roundtrip_bit_exact(tmp_path):
    b = _bundle_for_io()
    save_model(b, tmp_path / "m.dghm")
    back = load_model(tmp_path / "m.dghm")
    assert back.arch == b.arch and back.input_spec == b.input_spec and back.metadata == b.metadata
    for n1, n2 in zip(b.network.nodes, back.network.nodes):
        assert (n1.name, n1.op, n1.inputs, n1.attrs) == (n2.name, n2.op, n2.inputs, n2.attrs)
        assert n1.params.keys() == n2.params.keys()
        for k in n1.params:
            assert n1.params[k].tobytes() == n2.params[k].tobytes()
    assert dumps_model(back) == dumps_model(b)


def test_truncated_model_is_a_checksum_error():
    raw = dumps_model(_bundle_for_io())
    for cut in (len(raw) - 1, len(raw) // 2, 13):
        with pytest.raises(ChecksumError):
            loads_model(raw[:cut])
    with pytest.raises(ModelFormatError):
        loads_model(b"junk")


def test_future_version_names_both_versions():
    raw = dumps_model(_bundle_for_io(), version=7)
    with pytest.raises(VersionError) as err:
        loads_model(raw)
    assert "7" in str(err.value) and "1" in str(err.value)
    assert err.value.found == 7 and err.value.supported == 1


def test_header_layout():
    raw = dumps_model(_bundle_for_io())
    assert raw[:4] == b"DGHM"
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    for key in ("format_version", "architecture", "layers", "bn_eps", "ema_momentum", "input_spec",
                "val_accuracy"):
        assert key in header
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    first = next(l for l in header["layers"] if l["params"])
    p = first["params"][0]
    blob = raw[8 + hlen:-4]
    arr = np.frombuffer(blob[p["offset"]:p["offset"] + 4 * int(np.prod(p["shape"]))], "<f4")
    node = next(n for n in _bundle_for_io().network.nodes if n.name == first["name"])
    np.testing.assert_array_equal(arr.reshape(p["shape"]), node.params[p["key"]])


def test_bundle_is_a_model_bundle():
    assert isinstance(_bundle_for_io(), ModelBundle)
