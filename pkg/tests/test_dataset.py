"""Offline dataset generation, sampling, and the binary file format."""

import numpy as np
import pytest

from epiflow.boat import EnvConfig, sample_disc_actions
from epiflow.data import (
    FIELDS,
    ChecksumMismatchError,
    EmptyDatasetError,
    MalformedHeaderError,
    OfflineDataset,
    VersionMismatchError,
    audit,
    export_csv,
    generate,
    load,
    sample_batch,
    save,
)

ENV = EnvConfig()


def test_generate_shapes_and_done_rows(tiny_dataset):
    ds = tiny_dataset
    assert len(ds) == 12 * 25
    done_rows = np.flatnonzero(ds.dones == 1.0)
    assert list(done_rows) == [25 * (k + 1) - 1 for k in range(12)]
    assert ds.xs.shape == (300, 2) and ds.acts.shape == (300, 2)


def test_generate_deterministic(tiny_dataset):
    again = generate(ENV, n_traj=12, horizon=25, seed=7)
    assert again == tiny_dataset


def test_trajectory_substreams_are_independent_of_count():
    few = generate(ENV, n_traj=3, horizon=10, seed=5)
    many = generate(ENV, n_traj=6, horizon=10, seed=5)
    np.testing.assert_array_equal(many.xs[:30], few.xs)
    np.testing.assert_array_equal(many.acts[:30], few.acts)


def test_audit_accepts_generated_data(tiny_dataset):
    gaps = audit(tiny_dataset)
    assert gaps["reward"] <= 1e-12 and gaps["safety"] <= 1e-12


def test_audit_flags_corruption(tiny_dataset):
    raw = tiny_dataset.rows.copy()
    raw[0, FIELDS.index("r")] += 1e-6
    bad = OfflineDataset(raw, tiny_dataset.meta, tiny_dataset.z_min, tiny_dataset.z_max)
    with pytest.raises(ValueError, match="reward"):
        audit(bad)


def test_stored_margins_match_recomputation(tiny_dataset):
    from epiflow.boat import reward_many, safety_many

    np.testing.assert_allclose(tiny_dataset.rewards, reward_many(tiny_dataset.xs, ENV), atol=1e-15)
    np.testing.assert_allclose(tiny_dataset.ells, safety_many(tiny_dataset.xs, ENV), atol=1e-15)


def test_suffix_return_bounds_cover_every_trajectory(tiny_dataset):
    ds = tiny_dataset
    gamma = ds.meta.env.gamma
    lo, hi = np.inf, -np.inf
    for k in range(ds.meta.n_traj):
        rs = ds.rewards[k * 25 : (k + 1) * 25]
        ret = 0.0
        suffix = []
        for r in rs[::-1]:
            ret = r + gamma * ret
            suffix.append(ret)
        lo = min(lo, min(suffix))
        hi = max(hi, max(suffix))
    assert ds.z_min == pytest.approx(lo, abs=1e-12)
    assert ds.z_max == pytest.approx(hi, abs=1e-12)


def test_sampled_budgets_stay_in_range(tiny_dataset):
    rng = np.random.default_rng(0)
    batch = sample_batch(tiny_dataset, 512, rng)
    assert np.all(batch.z >= tiny_dataset.z_min)
    assert np.all(batch.z <= tiny_dataset.z_max)
    np.testing.assert_allclose(
        batch.z_next, (batch.z - batch.rs) / ENV.gamma, atol=1e-12
    )
    np.testing.assert_array_equal(batch.xs, tiny_dataset.xs[batch.idx])


def test_disc_action_second_moment():
    # E ||a||^2 = 0.5 for the uniform disc; Var(||a||^2) = 1/12
    n = 100_000
    acts = sample_disc_actions(np.random.default_rng(42), n)
    mean_sq = np.mean(acts[:, 0] ** 2 + acts[:, 1] ** 2)
    sigma = np.sqrt(1.0 / 12.0 / n)
    assert abs(mean_sq - 0.5) <= 3 * sigma


def test_save_load_roundtrip(tmp_path, tiny_dataset):
    path = tmp_path / "ds.bin"
    save(tiny_dataset, str(path))
    loaded = load(str(path))
    assert loaded == tiny_dataset
    assert loaded.meta.env == tiny_dataset.meta.env


def test_save_is_idempotent(tmp_path, tiny_dataset):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save(tiny_dataset, str(p1))
    save(tiny_dataset, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_bit_flip(tmp_path, tiny_dataset):
    path = tmp_path / "ds.bin"
    save(tiny_dataset, str(path))
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatchError):
        load(str(path))


def test_load_rejects_truncation(tmp_path, tiny_dataset):
    path = tmp_path / "ds.bin"
    save(tiny_dataset, str(path))
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(ChecksumMismatchError):
        load(str(path))


def test_load_rejects_wrong_version(tmp_path, tiny_dataset):
    path = tmp_path / "ds.bin"
    save(tiny_dataset, str(path))
    path.write_bytes(path.read_bytes().replace(b"epiflow-dataset v1", b"epiflow-dataset v7", 1))
    with pytest.raises(VersionMismatchError):
        load(str(path))


def test_load_rejects_garbled_header(tmp_path):
    path = tmp_path / "ds.bin"
    path.write_bytes(b"not a dataset at all\n\n")
    with pytest.raises(MalformedHeaderError):
        load(str(path))


def test_generate_rejects_bad_arguments():
    with pytest.raises(ValueError):
        generate(ENV, n_traj=0, horizon=10, seed=0)
    with pytest.raises(ValueError):
        generate(ENV, n_traj=10, horizon=0, seed=0)
    with pytest.raises(ValueError):
        generate(ENV, n_traj=10, horizon=10, seed=0, max_transitions=50)


def test_csv_export(tmp_path, tiny_dataset):
    path = tmp_path / "ds.csv"
    export_csv(tiny_dataset, str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",") == list(FIELDS)
    assert len(lines) == len(tiny_dataset) + 1
