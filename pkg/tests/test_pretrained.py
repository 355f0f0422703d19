"""Checks on the reference model shipped with the package."""
import numpy as np
import pytest

from dgh.quant import QuantScheme, calibrate, evaluate_quantized
from dgh.stats import full_set_stats
from dgh.zoo.bundle import collect_bn_targets
from dgh.zoo.data import augment_batch
from dgh.zoo.pretrained import N_TRAIN, N_VAL, load_reference, reference_splits
from dgh.zoo.train import evaluate_float


@pytest.fixture(scope="module")
def shipped():
    bundle = load_reference()
    train, val = reference_splits()
    return bundle, train, val


def test_metadata_describes_the_training_run(shipped):
    bundle, _, _ = shipped
    assert bundle.arch == "tiny-resnet"
    assert bundle.metadata["dataset"] == {"name": "shapes", "n_train": N_TRAIN, "n_val": N_VAL, "seed": 0}
    assert list(bundle.input_spec["range"]) == [-2.0, 2.0]


def test_float_accuracy(shipped):
    bundle, _, val = shipped
    acc = evaluate_float(bundle, val)
    assert acc > 0.8
    assert acc == pytest.approx(bundle.metadata["val_accuracy"], abs=1e-12)


def test_running_stats_match_augmented_training_data(shipped):
    bundle, train, _ = shipped
    rng = np.random.default_rng(0)
    images = augment_batch(train.images, rng, bundle.metadata["train"]["crop_margin"])
    stats = full_set_stats(bundle.network, images, chunk=250)
    for (mu, var), t in zip(stats, collect_bn_targets(bundle)):
        # mean gap measured in units of the layer's spread, variance gap relative
        assert np.linalg.norm(mu - t.mu) <= 0.05 * np.sqrt(t.sigma.sum()), t.name
        assert np.linalg.norm(var - t.sigma) <= 0.05 * np.linalg.norm(t.sigma), t.name


def test_w8a8_real_calibration_is_near_float(shipped):
    bundle, train, val = shipped
    real = train.sample(64, np.random.default_rng([0, 2])).images
    scheme = QuantScheme(8, 8)
    res = evaluate_quantized(bundle, calibrate(bundle, real, scheme), scheme, val)
    assert abs(res["gap"]) <= 0.01
