import warnings

import numpy as np
import pytest

from dgh.core import Tensor
from dgh.stats import GlobalStatStore, aggregate_global, full_set_stats
from dgh.synth import preprocess as prep
from dgh.synth.generate import (SynthesisConfig, SynthesisError, _Step, generate, init_image_set)
from dgh.synth.losses import odsl, total_loss
from dgh.synth.optim import RAdamState, ReduceLROnPlateau, radam_step
from dgh.zoo.bundle import BnTarget, collect_bn_targets
from dgh.zoo.data import input_spec
from dgh.zoo.network import UnsupportedModelError

from .oracles import central_difference, rel_err, two_pass_channel_stats
from .toys import toy_bundle


# ---------------------------------------------------------------- preprocessing

def test_smoothing_preserves_constants():
    x = np.full((2, 3, 6, 6), 1.7)
    np.testing.assert_allclose(prep.smooth(Tensor(x)).data, x, rtol=1e-12)


def test_smoothing_impulse_response():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    y = prep.smooth(Tensor(x)).data[0, 0]
    assert y[2, 2] == pytest.approx(0.25)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        assert y[2 + dy, 2 + dx] == pytest.approx(0.125)
    for dy, dx in ((-1, -1), (-1, 1), (1, -1), (1, 1)):
        assert y[2 + dy, 2 + dx] == pytest.approx(0.0625)
    assert y.sum() == pytest.approx(1.0)


def test_flip_is_an_involution():
    x = np.random.default_rng(0).standard_normal((3, 2, 4, 5))
    d = prep.PrepDraw(np.ones(3, bool), np.zeros((3, 2), int))
    once, _ = prep.preprocess(Tensor(x), None, smoothing=False, fixed=d)
    twice, _ = prep.preprocess(once, None, smoothing=False, fixed=d)
    np.testing.assert_array_equal(once.data, x[..., ::-1])
    np.testing.assert_array_equal(twice.data, x)


def test_crop_offsets_and_errors():
    x = np.arange(2 * 1 * 6 * 6, dtype=np.float64).reshape(2, 1, 6, 6)
    d = prep.PrepDraw(np.zeros(2, bool), np.array([[0, 2], [1, 0]]))
    y, _ = prep.preprocess(Tensor(x), None, smoothing=False, out_size=(4, 4), fixed=d)
    np.testing.assert_array_equal(y.data[0], x[0, :, 0:4, 2:6])
    np.testing.assert_array_equal(y.data[1], x[1, :, 1:5, 0:4])
    with pytest.raises(ValueError):
        prep.preprocess(Tensor(x), None, out_size=(8, 8), fixed=d)
    with pytest.raises(ValueError):
        init_image_set(SynthesisConfig(num_images=2, batch_size=1, crop_margin=8), input_spec(3, 8, 8), 0)


def test_crop_margin_scaling():
    assert prep.crop_margin_for(224) == 32
    assert prep.crop_margin_for(32) == 4
    assert all(prep.crop_margin_for(h) % 2 == 0 for h in range(8, 300))


def test_random_draws_are_reproducible():
    a = prep.draw(np.random.default_rng(1), 50, 4)
    b = prep.draw(np.random.default_rng(1), 50, 4)
    np.testing.assert_array_equal(a.flip, b.flip)
    np.testing.assert_array_equal(a.offsets, b.offsets)
    assert 0 <= a.offsets.min() and a.offsets.max() <= 4
    assert 10 < a.flip.sum() < 40


# ---------------------------------------------------------------- losses

def _t(mu, sigma):
    return BnTarget(1, "bn", np.asarray(mu, np.float64), np.asarray(sigma, np.float64))


def test_odsl_vanishes_for_flat_output_at_target():
    t = _t([0.5, -1.0], [1.0, 2.0])
    out = Tensor(np.full((1, 4), 3.0))
    v = odsl(out, Tensor(t.mu[None]), Tensor(t.sigma[None]), t, delta=0.0)
    assert v.data.tolist() == [0.0]


def test_odsl_range_term():
    t = _t([0.0], [1.0])
    out = Tensor(np.array([[1.0, -1.0, 0.5]]))
    v = odsl(out, Tensor(np.array([[0.1]])), Tensor(np.array([[1.1]])), t, delta=0.05)
    assert v.data.tolist() == [-4.0]


def test_odsl_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    k, c, o = 5, 3, 7
    t = _t(rng.standard_normal(c), rng.uniform(0.5, 2, c))
    out, mu, var = rng.standard_normal((k, o)), rng.standard_normal((k, c)), rng.uniform(0, 3, (k, c))
    delta = 1.5
    got = odsl(Tensor(out), Tensor(mu), Tensor(var), t, delta).data
    hinged = 0
    for i in range(k):
        span = max(out[i]) - min(out[i])
        gm = sum((mu[i, j] - t.mu[j]) ** 2 for j in range(c))
        gv = sum((var[i, j] - t.sigma[j]) ** 2 for j in range(c))
        hinged += (gm > delta) + (gv > delta)
        want = -span ** 2 + max(gm - delta, 0) + max(gv - delta, 0)
        assert got[i] == pytest.approx(want, rel=1e-12)
    assert 0 < hinged < 2 * k  # both hinge branches exercised


def test_odsl_scalar_output_warns():
    t = _t([0.0], [1.0])
    with pytest.warns(RuntimeWarning, match="scalar"):
        v = odsl(Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 1))), Tensor(np.ones((2, 1))), t, 0.1)
    np.testing.assert_array_equal(v.data, 0.0)


def test_total_loss_arithmetic():
    assert total_loss(Tensor(np.array(25.0)), Tensor(np.array(-4.0)), 0.5).item() == 23.0
    assert total_loss(Tensor(np.array(25.0)), Tensor(np.array(-4.0)), 0.0).item() == 25.0
    with pytest.raises(ValueError):
        total_loss(Tensor(np.array(1.0)), None, -1.0)


# ---------------------------------------------------------------- optimizer

def test_radam_zero_gradient_is_fixed_point():
    p = np.random.default_rng(3).standard_normal(6)
    state = RAdamState.zeros_like(p)
    for _ in range(10):
        q, state = radam_step(state, p, np.zeros_like(p), lr=0.5)
        np.testing.assert_array_equal(q, p)


def _radam_reference(x0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar RAdam written straight from the published recurrence."""
    x, m, v = float(x0), 0.0, 0.0
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        rho = rho_inf - 2.0 * t * b2 ** t / (1 - b2 ** t)
        if rho > 4:
            r = ((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho)) ** 0.5
            x -= lr * r * m_hat / (((v / (1 - b2 ** t)) ** 0.5) + eps)
        else:
            x -= lr * m_hat
    return x


def test_radam_quadratic_matches_reference_recurrence():
    x = np.array([10.0])
    state = RAdamState.zeros_like(x)
    for _ in range(200):
        x, state = radam_step(state, x, 2 * x, lr=0.1)
    assert x[0] == pytest.approx(_radam_reference(10.0, lambda z: 2 * z, 0.1, 200), rel=1e-9)


def test_radam_quadratic_converges():
    x = np.array([10.0])
    state = RAdamState.zeros_like(x)
    for _ in range(400):
        x, state = radam_step(state, x, 2 * x, lr=0.1)
    assert abs(x[0]) < 1e-2


def test_radam_first_steps_hand_unrolled():
    # constant gradient g: m_t = (1 - b1^t) g so m_hat = g; rho_t <= 4 for t <= 4 at b2 = 0.999
    g, lr = 0.3, 0.01
    b2 = 0.999
    rho_inf = 2 / (1 - b2) - 1
    x = np.array([1.0])
    state = RAdamState.zeros_like(x)
    expected = 1.0
    for t in range(1, 5):
        rho_t = rho_inf - 2 * t * b2 ** t / (1 - b2 ** t)
        assert rho_t <= 4
        x, state = radam_step(state, x, np.array([g]), lr)
        expected -= lr * g
        assert x[0] == pytest.approx(expected, rel=1e-12)
    # step 5 is the first rectified one
    x, state = radam_step(state, x, np.array([g]), lr)
    t = 5
    rho_t = rho_inf - 2 * t * b2 ** t / (1 - b2 ** t)
    r = np.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    expected -= lr * r * g / (abs(g) + 1e-8)
    assert x[0] == pytest.approx(expected, rel=1e-10)


def test_radam_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        radam_step(RAdamState.zeros_like(np.zeros(2)), np.zeros(2), np.array([np.nan, 0]), 0.1)


def test_plateau_schedule():
    s = ReduceLROnPlateau(1.0, factor=0.5, patience=2)
    lrs = [s.step(v) for v in (5, 4, 4, 4, 4, 4, 4, 3, 3, 3, 3)]
    assert lrs == [1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.25]


# ---------------------------------------------------------------- image sets and generation

def test_init_is_deterministic_and_standard_normal():
    cfg = SynthesisConfig(num_images=1024, batch_size=32, crop=False)
    a = init_image_set(cfg, input_spec(3, 6, 6), seed=4)
    b = init_image_set(cfg, input_spec(3, 6, 6), seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.num_batches == 32
    px = a.images.reshape(-1)[:100000].astype(np.float64)
    se = 1 / np.sqrt(px.size)
    assert abs(px.mean()) < 3 * se
    assert abs(px.std() - 1) < 3 * se * np.sqrt(0.5) * 2


def test_config_validation():
    with pytest.raises(ValueError):
        SynthesisConfig(num_images=10, batch_size=4)
    with pytest.raises(ValueError):
        SynthesisConfig(iterations=-1)
    with pytest.raises(ValueError):
        SynthesisConfig(lam=-0.1)
    with pytest.raises(ValueError):
        SynthesisConfig(crop_margin=3)
    with pytest.raises(ValueError):
        SynthesisConfig(mode="per-batch", batch_size=8, scope=3)
    assert SynthesisConfig(mode="per-image").effective_scope == 1


def _small_cfg(**kw):
    base = dict(num_images=8, batch_size=4, iterations=2, lr=0.1, crop_margin=2)
    base.update(kw)
    return SynthesisConfig(**base)


def test_zero_iterations_returns_initial_noise():
    bundle = toy_bundle(seed=5)
    cfg = _small_cfg(iterations=0)
    ims, trace = generate(bundle, cfg, seed=6)
    np.testing.assert_array_equal(ims.images, init_image_set(cfg, bundle.input_spec, 6).images)
    assert trace.rows == [] and trace.final_full_bns == trace.initial_full_bns


def test_bn_free_model_unsupported():
    bundle = toy_bundle(seed=5, widths=())
    with pytest.raises(UnsupportedModelError):
        generate(bundle, _small_cfg(), seed=0)


def test_generate_is_deterministic_and_traced():
    bundle = toy_bundle(seed=7)
    cfg = _small_cfg(iterations=3)
    a, ta = generate(bundle, cfg, seed=1)
    b, tb = generate(bundle, cfg, seed=1)
    np.testing.assert_array_equal(a.images, b.images)
    assert ta.to_csv() == tb.to_csv()
    assert len(ta.rows) == 3 * cfg.num_batches
    assert ta.to_csv().startswith("epoch,batch,bns,odsl,total,lr\r\n")
    assert np.isfinite(a.images).all()
    lo, hi = bundle.input_spec["range"]
    assert a.images.min() >= lo and a.images.max() <= hi


def test_not_divisible_partition_rejected():
    with pytest.raises(ValueError, match="batches"):
        init_image_set(SynthesisConfig(num_images=9, batch_size=4), input_spec(3, 8, 8), 0)


def test_other_batches_untouched_during_a_step(monkeypatch):
    import dgh.synth.generate as gen

    bundle = toy_bundle(seed=8)
    cfg = _small_cfg(iterations=2, num_images=12)
    ims = init_image_set(cfg, bundle.input_spec, 2)
    snaps = []
    real_step = gen.radam_step

    def spy(state, params, grads, lr, betas):
        snaps.append(ims.images.copy())
        return real_step(state, params, grads, lr, betas)

    monkeypatch.setattr(gen, "radam_step", spy)
    generate(bundle, cfg, seed=2, image_set=ims)
    snaps.append(ims.images.copy())
    assert len(snaps) == 2 * cfg.num_batches + 1
    for i in range(len(snaps) - 1):
        active = i % cfg.num_batches
        for n in range(cfg.num_batches):
            sl = ims.batch_slice(n)
            same = np.array_equal(snaps[i][sl], snaps[i + 1][sl])
            assert same == (n != active)


def test_store_matches_final_images_after_epoch():
    """With fixed preprocessing the stored records equal a direct full pass over the final set."""
    bundle = toy_bundle(seed=9)
    cfg = _small_cfg(num_images=16, batch_size=4, iterations=1, flip=False, crop=False, smoothing=False)
    ims, _ = generate(bundle, cfg, seed=3)
    # replay: recompute records from the final images and compare an aggregate with the direct pass
    store = GlobalStatStore(cfg.num_batches)
    step = _Step(bundle, cfg, ims, store, 0.1)
    for n in range(cfg.num_batches):
        store.set_record(n, step.record(n, ims.images[ims.batch_slice(n)], None))
    direct = full_set_stats(bundle.network, ims.images)
    for (mu, var), (dm, dv) in zip(aggregate_global(store), direct):
        assert rel_err(mu, dm).max() < 1e-6
        assert rel_err(var, dv).max() < 1e-6


def test_global_step_statistics_are_those_of_the_whole_set():
    bundle = toy_bundle(seed=10, dtype=np.float64)
    cfg = _small_cfg(num_images=12, batch_size=4, flip=False, crop=False, smoothing=False, odsl=False)
    ims = init_image_set(cfg, bundle.input_spec, 0)
    ims.images = ims.images.astype(np.float64)
    store = GlobalStatStore(cfg.num_batches)
    step = _Step(bundle, cfg, ims, store, 0.1)
    for n in range(cfg.num_batches):
        store.set_record(n, step.record(n, ims.images[ims.batch_slice(n)], None))
    total, bns, _, _ = step.loss(1, Tensor(ims.images[ims.batch_slice(1)]), None)
    res = bundle.network.forward(ims.images, stop_at_last_bn=True)
    want = 0.0
    for f, t in zip(res.bn_inputs, collect_bn_targets(bundle)):
        m, _, v = two_pass_channel_stats(f.data)
        want += ((m - t.mu) ** 2).sum() + ((v - t.sigma) ** 2).sum()
    assert rel_err(bns.item(), want).max() < 1e-9
    assert total.item() == bns.item()


def test_per_image_first_step_equals_independent_runs():
    """N = M batches of K = 1: the first step of each image matches a solo run bit for bit."""
    bundle = toy_bundle(seed=11)
    kw = dict(iterations=1, mode="per-image", flip=False, crop=False)
    joint_cfg = _small_cfg(num_images=4, batch_size=1, **kw)
    joint, _ = generate(bundle, joint_cfg, seed=5)
    start = init_image_set(joint_cfg, bundle.input_spec, 5).images
    solo_cfg = _small_cfg(num_images=1, batch_size=1, **kw)
    for k in range(4):
        one = init_image_set(solo_cfg, bundle.input_spec, 0)
        one.images = start[k:k + 1].copy()
        got, _ = generate(bundle, solo_cfg, seed=5, image_set=one)
        np.testing.assert_array_equal(got.images[0], joint.images[k])


def test_per_batch_groups_are_independent():
    """In per-batch mode, the gradient for one scope group ignores the others' pixels."""
    bundle = toy_bundle(seed=12, dtype=np.float64)
    cfg = _small_cfg(num_images=4, batch_size=4, mode="per-batch", scope=2, flip=False, crop=False)
    ims = init_image_set(cfg, bundle.input_spec, 0)
    step = _Step(bundle, cfg, ims, None, 0.1)
    base = ims.images.astype(np.float64)

    def grad_of(images):
        x = Tensor(images.copy(), requires_grad=True)
        total, *_ = step.loss(0, x, None)
        total.backward()
        return x.grad

    g1 = grad_of(base)
    moved = base.copy()
    moved[2:] += 0.5
    g2 = grad_of(moved)
    np.testing.assert_allclose(g1[:2], g2[:2], rtol=1e-10, atol=1e-12)
    assert not np.allclose(g1[2:], g2[2:])


def test_numeric_failure_reports_iteration(monkeypatch):
    import dgh.synth.generate as gen

    bundle = toy_bundle(seed=13)
    cfg = _small_cfg(iterations=3)
    ims = init_image_set(cfg, bundle.input_spec, 0)
    ims.images[0, 0, 0, 0] = np.inf
    with pytest.raises(SynthesisError) as err:
        generate(bundle, cfg, seed=0, image_set=ims)
    assert err.value.iteration == 0

    calls = []
    real_step = gen.radam_step

    def poisoned(state, params, grads, lr, betas):
        calls.append(1)
        if len(calls) == 2 * cfg.num_batches + 1:
            grads = grads * np.nan
        return real_step(state, params, grads, lr, betas)

    monkeypatch.setattr(gen, "radam_step", poisoned)
    with pytest.raises(SynthesisError) as err:
        generate(bundle, cfg, seed=0)
    assert err.value.iteration == 3 and "iteration 3" in str(err.value)


def _fd_total_loss_check(seed, mode):
    bundle = toy_bundle(seed=seed, dtype=np.float64)
    cfg = SynthesisConfig(num_images=8, batch_size=4, iterations=1, mode=mode, crop_margin=2, lam=0.5,
                          scope=2 if mode == "per-batch" else None)
    ims = init_image_set(cfg, bundle.input_spec, seed)
    ims.images = ims.images.astype(np.float64)
    store = GlobalStatStore(cfg.num_batches) if mode == "global" else None
    delta = 0.05
    step = _Step(bundle, cfg, ims, store, delta)
    rng = np.random.default_rng(seed)
    if store is not None:
        for n in range(cfg.num_batches):
            store.set_record(n, step.record(n, ims.images[ims.batch_slice(n)], rng))
    d = prep.draw(rng, cfg.batch_size, cfg.margin_for(8))
    x0 = ims.images[ims.batch_slice(1)].copy()
    x = Tensor(x0.copy(), requires_grad=True)
    total, *_ = step.loss(1, x, None, fixed=d)
    total.backward()
    coords = np.random.default_rng(seed + 1).choice(x0.size, 25, replace=False)
    fd = central_difference(lambda v: step.loss(1, Tensor(v), None, fixed=d)[0].item(), x0, 1e-5, coords)
    got = x.grad.reshape(-1)[coords]
    return rel_err(got, fd.reshape(-1)[coords]).max()


@pytest.mark.parametrize("mode", ["global", "per-batch", "per-image"])
def test_total_loss_gradient_finite_differences(mode):
    assert _fd_total_loss_check(21, mode) < 1e-3
