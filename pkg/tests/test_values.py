"""Value bundle: losses, gradients, training loop, checkpoints."""

import numpy as np
import pytest

from conftest import finite_difference_check, random_batch
from epiflow.nets import CheckpointError
from epiflow.values import (
    TrainingDiverged,
    ValueBundle,
    ValueTrainConfig,
    _distill,
    load_bundle,
    loss_q_hat,
    loss_regularizer,
    loss_reward_envelope,
    loss_safety_envelope,
    loss_v_hat,
    q_hat_target,
    save_bundle,
    train,
)


def tiny_bundle(seed):
    return ValueBundle(-6.0, 0.0, 0.99, hidden=(6,), seed=seed)


def test_q_hat_target_formula():
    ell = np.array([0.5, -0.2, 1.0])
    v_next = np.array([2.0, 4.0, -1.0])
    np.testing.assert_allclose(
        q_hat_target(ell, v_next, 0.9), [0.5, -0.2, -0.9], atol=1e-15
    )


def test_loss_grad_keys():
    rng = np.random.default_rng(0)
    bundle = tiny_bundle(0)
    batch = random_batch(rng, n=8)
    assert set(loss_q_hat(bundle, batch)[1]) == {"q_hat_a", "q_hat_b"}
    assert set(loss_v_hat(bundle, batch, 0.9)[1]) == {"v_hat"}
    assert set(loss_reward_envelope(bundle, batch, 0.9)[1]) == {"q_r_a", "q_r_b", "v_r"}
    assert set(loss_safety_envelope(bundle, batch, 0.9)[1]) == {"q_s_a", "q_s_b", "v_s"}
    assert set(loss_regularizer(bundle, batch)[1]) == {"v_hat"}


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_q_hat_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    bundle = tiny_bundle(seed)
    batch = random_batch(rng, n=8)
    _, grads = loss_q_hat(bundle, batch)
    for name in ("q_hat_a", "q_hat_b"):
        finite_difference_check(
            lambda: loss_q_hat(bundle, batch)[0], getattr(bundle, name), grads[name]
        )


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_v_hat_distillation_gradients(seed):
    rng = np.random.default_rng(seed)
    bundle = tiny_bundle(seed)
    batch = random_batch(rng, n=8)
    _, grads = loss_v_hat(bundle, batch, 0.9)
    finite_difference_check(
        lambda: loss_v_hat(bundle, batch, 0.9)[0], bundle.v_hat, grads["v_hat"]
    )


@pytest.mark.parametrize("seed", [3, 4, 5])
def test_envelope_q_head_gradients(seed):
    # the envelope targets depend on the V nets, so only the Q heads are
    # finite-difference checked against the full loss; the V heads get a
    # fixed-target check below
    rng = np.random.default_rng(seed)
    bundle = tiny_bundle(seed)
    batch = random_batch(rng, n=8)
    _, g_r = loss_reward_envelope(bundle, batch, 0.9)
    for name in ("q_r_a", "q_r_b"):
        finite_difference_check(
            lambda: loss_reward_envelope(bundle, batch, 0.9)[0],
            getattr(bundle, name),
            g_r[name],
        )
    _, g_s = loss_safety_envelope(bundle, batch, 0.9)
    for name in ("q_s_a", "q_s_b"):
        finite_difference_check(
            lambda: loss_safety_envelope(bundle, batch, 0.9)[0],
            getattr(bundle, name),
            g_s[name],
        )


@pytest.mark.parametrize("seed", [6, 7, 8])
@pytest.mark.parametrize("name,tau", [("v_r", 0.9), ("v_s", 0.7), ("v_hat", 0.9)])
def test_distill_gradients_fixed_target(name, tau, seed):
    rng = np.random.default_rng(seed)
    bundle = tiny_bundle(seed)
    batch = random_batch(rng, n=8)
    feat = (
        bundle.f_xz(batch.xs, batch.z) if name == "v_hat" else bundle.f_x(batch.xs)
    )
    target = rng.uniform(-2.0, 2.0, size=feat.shape[0])
    _, grads = _distill(bundle, name, feat, target, tau, 1.7)
    finite_difference_check(
        lambda: _distill(bundle, name, feat, target, tau, 1.7)[0],
        getattr(bundle, name),
        grads[name],
    )


@pytest.mark.parametrize("seed", [9, 10, 11])
def test_regularizer_gradients(seed):
    rng = np.random.default_rng(seed)
    bundle = tiny_bundle(seed)
    batch = random_batch(rng, n=8)
    _, grads = loss_regularizer(bundle, batch)
    finite_difference_check(
        lambda: loss_regularizer(bundle, batch)[0], bundle.v_hat, grads["v_hat"]
    )


def test_regularizer_value_by_hand():
    rng = np.random.default_rng(12)
    bundle = tiny_bundle(12)
    batch = random_batch(rng, n=32)
    loss, _ = loss_regularizer(bundle, batch)
    bound = np.minimum(
        bundle.v_r_eval(batch.xs) - batch.z, bundle.v_s_eval(batch.xs)
    )
    expected = np.mean(np.maximum(0.0, bundle.v_hat_eval(batch.xs, batch.z) - bound))
    assert loss == pytest.approx(expected, rel=1e-12)


def test_symmetric_distillation_is_half_mse():
    rng = np.random.default_rng(13)
    bundle = tiny_bundle(13)
    batch = random_batch(rng, n=16)
    feat = bundle.f_xz(batch.xs, batch.z)
    target = rng.uniform(-2.0, 2.0, size=16)
    loss, _ = _distill(bundle, "v_hat", feat, target, 0.5, bundle.value_scale)
    out = bundle.v_hat_eval(batch.xs, batch.z)
    assert loss == pytest.approx(0.5 * np.mean((target - out) ** 2), rel=1e-12)


def test_two_head_target_is_elementwise_min():
    rng = np.random.default_rng(14)
    bundle = tiny_bundle(14)
    batch = random_batch(rng, n=16)
    feat = bundle.f_xza(batch.xs, batch.z, batch.acts)
    a = bundle.q_hat_ta.forward(feat)[:, 0] * bundle.value_scale
    b = bundle.q_hat_tb.forward(feat)[:, 0] * bundle.value_scale
    got = bundle.q_hat_target_min(batch.xs, batch.z, batch.acts)
    np.testing.assert_array_equal(got, np.minimum(a, b))
    assert np.all(got <= a) and np.all(got <= b)


def test_ema_moves_targets_not_online():
    rng = np.random.default_rng(15)
    bundle = tiny_bundle(15)
    batch = random_batch(rng, n=8)
    # perturb online nets away from their shadows first
    _, grads = loss_q_hat(bundle, batch)
    for i, (dw, db) in enumerate(grads["q_hat_a"]):
        bundle.q_hat_a.weights[i] -= 0.1 * dw
        bundle.q_hat_a.biases[i] -= 0.1 * db
    online_before = [w.copy() for w in bundle.q_hat_a.weights]
    shadow_before = [w.copy() for w in bundle.q_hat_ta.net.weights]
    bundle.ema_update(0.25)
    for w_new, w_old, s_old in zip(
        bundle.q_hat_ta.net.weights, online_before, shadow_before
    ):
        np.testing.assert_allclose(w_new, 0.75 * s_old + 0.25 * w_old, atol=1e-15)
    for w_now, w_old in zip(bundle.q_hat_a.weights, online_before):
        np.testing.assert_array_equal(w_now, w_old)


def test_from_dataset_geometry(tiny_dataset):
    cfg = ValueTrainConfig(hidden=(8,), steps=1)
    bundle = ValueBundle.from_dataset(tiny_dataset, cfg)
    assert bundle.z_min == tiny_dataset.z_min
    assert bundle.z_max == tiny_dataset.z_max
    np.testing.assert_allclose(bundle.x_center, [-0.5, 0.0])
    np.testing.assert_allclose(bundle.x_half, [2.5, 2.0])
    assert bundle.safety_scale == max(1.0, float(np.max(np.abs(tiny_dataset.ells))))


def test_training_is_deterministic(tiny_dataset, tmp_path):
    cfg = ValueTrainConfig(steps=40, hidden=(8, 8), batch=32, seed=5)
    a = train(tiny_dataset, cfg)
    b = train(tiny_dataset, cfg)
    assert a.history == b.history
    pa, pb = tmp_path / "a.bundle", tmp_path / "b.bundle"
    save_bundle(a, str(pa), cfg)
    save_bundle(b, str(pb), cfg)
    assert pa.read_bytes() == pb.read_bytes()


def test_history_schedule(tiny_dataset):
    cfg = ValueTrainConfig(steps=3, hidden=(8,), batch=16, seed=1)
    bundle = train(tiny_dataset, cfg)
    assert [h["step"] for h in bundle.history] == [0.0, 2.0]
    assert set(bundle.history[0]) == {
        "step",
        "loss_q_hat",
        "loss_reward",
        "loss_safety",
        "loss_v_hat",
        "loss_reg",
    }


def test_huge_learning_rate_diverges(tiny_dataset):
    cfg = ValueTrainConfig(steps=5, hidden=(8,), batch=16, lr=1e6, seed=2)
    with pytest.raises(TrainingDiverged):
        train(tiny_dataset, cfg)


def test_gamma_mismatch_rejected(tiny_dataset):
    cfg = ValueTrainConfig(steps=1, hidden=(8,), gamma=0.95)
    with pytest.raises(ValueError, match="gamma"):
        train(tiny_dataset, cfg)


def test_bundle_roundtrip(small_bundle, tmp_path):
    rng = np.random.default_rng(16)
    batch = random_batch(rng, n=20, z_lo=small_bundle.z_min, z_hi=small_bundle.z_max)
    path = tmp_path / "bundle.bin"
    cfg = ValueTrainConfig(steps=120, hidden=(16, 16), batch=64, seed=3)
    save_bundle(small_bundle, str(path), cfg)
    loaded, loaded_cfg = load_bundle(str(path))
    assert loaded_cfg == cfg
    np.testing.assert_array_equal(
        loaded.v_hat_eval(batch.xs, batch.z),
        small_bundle.v_hat_eval(batch.xs, batch.z),
    )
    np.testing.assert_array_equal(
        loaded.q_hat_min_eval(batch.xs, batch.z, batch.acts),
        small_bundle.q_hat_min_eval(batch.xs, batch.z, batch.acts),
    )
    np.testing.assert_array_equal(
        loaded.q_hat_target_min(batch.xs, batch.z, batch.acts),
        small_bundle.q_hat_target_min(batch.xs, batch.z, batch.acts),
    )
    np.testing.assert_array_equal(
        loaded.v_r_eval(batch.xs), small_bundle.v_r_eval(batch.xs)
    )
    np.testing.assert_array_equal(
        loaded.v_s_eval(batch.xs), small_bundle.v_s_eval(batch.xs)
    )


def test_bundle_checkpoint_tampering(small_bundle, tmp_path):
    path = tmp_path / "bundle.bin"
    save_bundle(small_bundle, str(path))
    raw = path.read_bytes()

    bad_magic = tmp_path / "magic.bin"
    bad_magic.write_bytes(raw.replace(b"epiflow-bundle v", b"epiflow-bandle v", 1))
    with pytest.raises(CheckpointError, match="magic"):
        load_bundle(str(bad_magic))

    bad_version = tmp_path / "version.bin"
    bad_version.write_bytes(raw.replace(b"-bundle v1", b"-bundle v9", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_bundle(str(bad_version))

    truncated = tmp_path / "short.bin"
    truncated.write_bytes(raw[:-100])
    with pytest.raises(CheckpointError):
        load_bundle(str(truncated))

    padded = tmp_path / "padded.bin"
    padded.write_bytes(raw + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        load_bundle(str(padded))


def test_config_validation():
    assert ValueTrainConfig(tau=0.5).tau == 0.5  # symmetric point is legal
    with pytest.raises(ValueError, match="tau"):
        ValueTrainConfig(tau=0.49)
    with pytest.raises(ValueError, match="tau"):
        ValueTrainConfig(tau=1.0)
    with pytest.raises(ValueError, match="lambda"):
        ValueTrainConfig(lam=-0.1)
    with pytest.raises(ValueError, match="gamma"):
        ValueTrainConfig(gamma=1.0)
    with pytest.raises(ValueError, match="rho"):
        ValueTrainConfig(rho=0.0)
    with pytest.raises(ValueError, match="batch"):
        ValueTrainConfig(batch=0)
