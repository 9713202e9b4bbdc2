"""Offline dataset generation, binary persistence, and minibatch sampling.

Trajectories come from a uniform-random behavior policy on the boat
task.  The dataset is stored column-packed in one (n, 9) float64 array;
a typed Transition view exists for callers that want single rows.

The on-disk format is an ASCII header followed by the raw little-endian
float64 block, with a CRC32 over the block.  See save()/load().
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import zlib

import numpy as np

from .boat import Action, EnvConfig, State, reward_many, safety_many, sample_disc_actions, step_many

DATASET_MAGIC = "epiflow-dataset"
DATASET_VERSION = 1
FIELDS = ("x1", "x2", "a1", "a2", "r", "ell", "x1_next", "x2_next", "done")
DEFAULT_MAX_TRANSITIONS = 20_000_000


class DatasetFormatError(ValueError):
    """Base class for problems with a serialized dataset."""


class MalformedHeaderError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class ChecksumMismatchError(DatasetFormatError):
    pass


class EmptyDatasetError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class Transition:
    x: State
    a: Action
    r: float
    ell: float
    x_next: State
    done: bool


@dataclass(frozen=True)
class DatasetMeta:
    env: EnvConfig
    n_traj: int
    horizon: int
    seed: int


@dataclass(frozen=True)
class Batch:
    """Struct-of-arrays minibatch; budget values z are sampled per item."""

    xs: np.ndarray
    acts: np.ndarray
    rs: np.ndarray
    ells: np.ndarray
    xs_next: np.ndarray
    dones: np.ndarray
    z: np.ndarray
    z_next: np.ndarray
    idx: np.ndarray


class OfflineDataset:
    """Immutable transition store with the budget-sampling interval."""

    def __init__(self, rows: np.ndarray, meta: DatasetMeta, z_min: float, z_max: float):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != len(FIELDS):
            raise ValueError(f"rows must be (n, {len(FIELDS)}), got {rows.shape}")
        if rows.shape[0] == 0:
            raise EmptyDatasetError("empty dataset")
        if not z_min <= z_max:
            raise ValueError(f"z_min {z_min} exceeds z_max {z_max}")
        self._rows = rows
        self._rows.setflags(write=False)
        self.meta = meta
        self.z_min = float(z_min)
        self.z_max = float(z_max)

    # column views ---------------------------------------------------------

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    @property
    def xs(self) -> np.ndarray:
        return self._rows[:, 0:2]

    @property
    def acts(self) -> np.ndarray:
        return self._rows[:, 2:4]

    @property
    def rewards(self) -> np.ndarray:
        return self._rows[:, 4]

    @property
    def ells(self) -> np.ndarray:
        return self._rows[:, 5]

    @property
    def xs_next(self) -> np.ndarray:
        return self._rows[:, 6:8]

    @property
    def dones(self) -> np.ndarray:
        return self._rows[:, 8]

    def __len__(self) -> int:
        return self._rows.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.z_min == other.z_min
            and self.z_max == other.z_max
            and np.array_equal(self._rows, other._rows)
        )

    def get(self, i: int) -> Transition:
        row = self._rows[i]
        return Transition(
            x=State(row[0], row[1]),
            a=Action(row[2], row[3]),
            r=row[4],
            ell=row[5],
            x_next=State(row[6], row[7]),
            done=bool(row[8]),
        )

    def transitions(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self.get(i)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _traj_stream(seed: int, index: int) -> np.random.Generator:
    # Substream identity is (seed, trajectory index) so any worker split
    # over trajectories reproduces the sequential result.
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate(
    cfg: EnvConfig,
    n_traj: int,
    horizon: int,
    seed: int,
    max_transitions: int = DEFAULT_MAX_TRANSITIONS,
) -> OfflineDataset:
    """Roll out n_traj trajectories of fixed length under random actions.

    Initial states are uniform over the state box.  Actions are uniform
    over the unit disc.  The budget interval [z_min, z_max] is the
    empirical range of discounted returns over every trajectory suffix.
    """
    if n_traj < 1 or horizon < 1:
        raise ValueError(f"need n_traj >= 1 and horizon >= 1, got {n_traj}, {horizon}")
    total = n_traj * horizon
    if total > max_transitions:
        raise ValueError(
            f"{n_traj} x {horizon} = {total} transitions exceeds the cap {max_transitions}"
        )

    starts = np.empty((n_traj, 2))
    acts = np.empty((n_traj, horizon, 2))
    for i in range(n_traj):
        rng = _traj_stream(seed, i)
        starts[i, 0] = rng.uniform(*cfg.x1_bounds)
        starts[i, 1] = rng.uniform(*cfg.x2_bounds)
        acts[i] = sample_disc_actions(rng, horizon)

    rows = np.empty((n_traj, horizon, len(FIELDS)))
    xs = starts
    for t in range(horizon):
        a_t = acts[:, t, :]
        xs_next = step_many(xs, a_t, cfg)
        rows[:, t, 0:2] = xs
        rows[:, t, 2:4] = a_t
        rows[:, t, 4] = reward_many(xs, cfg)
        rows[:, t, 5] = safety_many(xs, cfg)
        rows[:, t, 6:8] = xs_next
        rows[:, t, 8] = 0.0
        xs = xs_next
    rows[:, horizon - 1, 8] = 1.0

    # suffix discounted returns, computed backward per trajectory
    suffix = np.zeros(n_traj)
    z_min = np.inf
    z_max = -np.inf
    for t in range(horizon - 1, -1, -1):
        suffix = rows[:, t, 4] + cfg.gamma * suffix
        z_min = min(z_min, suffix.min())
        z_max = max(z_max, suffix.max())

    meta = DatasetMeta(env=cfg, n_traj=n_traj, horizon=horizon, seed=seed)
    return OfflineDataset(rows.reshape(total, len(FIELDS)), meta, float(z_min), float(z_max))


def sample_batch(ds: OfflineDataset, batch: int, rng: np.random.Generator) -> Batch:
    """Uniform-with-replacement transitions plus per-item budget draws."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    idx = rng.integers(0, len(ds), size=batch)
    z = rng.uniform(ds.z_min, ds.z_max, size=batch)
    rows = ds.rows[idx]
    rs = rows[:, 4]
    return Batch(
        xs=rows[:, 0:2],
        acts=rows[:, 2:4],
        rs=rs,
        ells=rows[:, 5],
        xs_next=rows[:, 6:8],
        dones=rows[:, 8],
        z=z,
        z_next=(z - rs) / ds.meta.env.gamma,
        idx=idx,
    )


def audit(ds: OfflineDataset, tol: float = 1e-12) -> dict[str, float]:
    """Self-consistency check: recompute r and ell from the stored states.

    Returns the worst absolute discrepancies and raises if either
    exceeds tol.
    """
    cfg = ds.meta.env
    dr = float(np.max(np.abs(ds.rewards - reward_many(ds.xs, cfg))))
    dell = float(np.max(np.abs(ds.ells - safety_many(ds.xs, cfg))))
    report = {"reward": dr, "safety": dell}
    if dr > tol or dell > tol:
        raise ValueError(f"stored reward/safety disagree with recomputation: {report}")
    return report


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _env_to_line(cfg: EnvConfig) -> str:
    obstacles = ";".join(f"{cx!r},{cy!r}" for cx, cy in cfg.obstacles)
    return (
        f"dt={cfg.dt!r} gamma={cfg.gamma!r} goal={cfg.goal[0]!r},{cfg.goal[1]!r} "
        f"reward_scale={cfg.reward_scale!r} obstacles={obstacles} "
        f"obstacle_radius={cfg.obstacle_radius!r} episode_length={cfg.episode_length} "
        f"x1_bounds={cfg.x1_bounds[0]!r},{cfg.x1_bounds[1]!r} "
        f"x2_bounds={cfg.x2_bounds[0]!r},{cfg.x2_bounds[1]!r}"
    )


def _env_from_line(line: str) -> EnvConfig:
    kv: dict[str, str] = {}
    for part in line.split():
        key, _, val = part.partition("=")
        if not val:
            raise MalformedHeaderError(f"bad env field {part!r}")
        kv[key] = val
    try:
        pair = lambda s: tuple(float(v) for v in s.split(","))  # noqa: E731
        return EnvConfig(
            dt=float(kv["dt"]),
            gamma=float(kv["gamma"]),
            goal=pair(kv["goal"]),  # type: ignore[arg-type]
            reward_scale=float(kv["reward_scale"]),
            obstacles=tuple(pair(p) for p in kv["obstacles"].split(";")),  # type: ignore[arg-type]
            obstacle_radius=float(kv["obstacle_radius"]),
            episode_length=int(kv["episode_length"]),
            x1_bounds=pair(kv["x1_bounds"]),  # type: ignore[arg-type]
            x2_bounds=pair(kv["x2_bounds"]),  # type: ignore[arg-type]
        )
    except (KeyError, ValueError) as exc:
        raise MalformedHeaderError(f"bad env line {line!r}: {exc}") from exc


def save(ds: OfflineDataset, path: str) -> None:
    block = np.ascontiguousarray(ds.rows, dtype="<f8").tobytes()
    header = (
        f"{DATASET_MAGIC} v{DATASET_VERSION}\n"
        f"fields {' '.join(FIELDS)}\n"
        f"count {len(ds)}\n"
        f"n_traj {ds.meta.n_traj}\n"
        f"horizon {ds.meta.horizon}\n"
        f"seed {ds.meta.seed}\n"
        f"env {_env_to_line(ds.meta.env)}\n"
        f"z_min {ds.z_min!r}\n"
        f"z_max {ds.z_max!r}\n"
        f"checksum {zlib.crc32(block):08x}\n"
        "\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(block)


def load(path: str) -> OfflineDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise MalformedHeaderError(f"{path}: missing header terminator")
    try:
        lines = raw[:sep].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise MalformedHeaderError(f"{path}: header is not ASCII") from exc
    if not lines:
        raise MalformedHeaderError(f"{path}: empty header")
    magic, _, version = lines[0].partition(" ")
    if magic != DATASET_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic line {lines[0]!r}")
    if version != f"v{DATASET_VERSION}":
        raise VersionMismatchError(
            f"{path}: format {version!r}, supported v{DATASET_VERSION}"
        )
    fields: dict[str, str] = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest
    for key in ("fields", "count", "n_traj", "horizon", "seed", "env", "z_min", "z_max", "checksum"):
        if key not in fields:
            raise MalformedHeaderError(f"{path}: header missing {key!r}")
    if tuple(fields["fields"].split()) != FIELDS:
        raise MalformedHeaderError(f"{path}: unexpected field list {fields['fields']!r}")
    try:
        count = int(fields["count"])
        z_min = float(fields["z_min"])
        z_max = float(fields["z_max"])
        meta = DatasetMeta(
            env=_env_from_line(fields["env"]),
            n_traj=int(fields["n_traj"]),
            horizon=int(fields["horizon"]),
            seed=int(fields["seed"]),
        )
    except MalformedHeaderError:
        raise
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: {exc}") from exc
    if count == 0:
        raise EmptyDatasetError(f"{path}: empty dataset")
    block = raw[sep + 2 :]
    expected = count * len(FIELDS) * 8
    if len(block) != expected:
        raise ChecksumMismatchError(
            f"{path}: data block holds {len(block)} bytes, expected {expected} (truncated?)"
        )
    if f"{zlib.crc32(block):08x}" != fields["checksum"]:
        raise ChecksumMismatchError(f"{path}: data block checksum mismatch")
    rows = np.frombuffer(block, dtype="<f8").astype(np.float64).reshape(count, len(FIELDS))
    return OfflineDataset(rows, meta, z_min, z_max)


def export_csv(ds: OfflineDataset, path: str) -> None:
    """Plain-text dump with the same columns as the binary format."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(FIELDS) + "\n")
        for row in ds.rows:
            fh.write(",".join(repr(v) for v in row) + "\n")
