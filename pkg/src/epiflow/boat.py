"""Boat-in-river environment: drift dynamics, goal reward, obstacle margin.

A 2-D boat drifts downstream while steering with a bounded velocity
command.  Reward is negative distance to a goal point, and the safety
margin is the distance to the nearest obstacle disc (negative inside).
Reward and margin are attributed to the state an action is taken from,
not the state it produces.

Scalar operations work on the small value types below; the *_many
variants take (n, 2) arrays and are what the data generator and the
rollout code actually call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTION_NORM_TOL = 1e-9


@dataclass(frozen=True)
class State:
    x1: float
    x2: float


@dataclass(frozen=True)
class Action:
    a1: float
    a2: float


@dataclass(frozen=True)
class AugmentedState:
    """Environment state paired with the running performance budget z."""

    state: State
    z: float


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.005
    gamma: float = 0.99
    goal: tuple[float, float] = (0.5, 0.0)
    reward_scale: float = 0.1
    obstacles: tuple[tuple[float, float], ...] = ((-0.5, 0.5), (-1.0, -1.2))
    obstacle_radius: float = 0.4
    episode_length: int = 400
    x1_bounds: tuple[float, float] = (-3.0, 2.0)
    x2_bounds: tuple[float, float] = (-2.0, 2.0)

    def __post_init__(self) -> None:
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.obstacle_radius <= 0.0:
            raise ValueError(f"obstacle radius must be positive, got {self.obstacle_radius}")
        if self.episode_length <= 0:
            raise ValueError(f"episode_length must be positive, got {self.episode_length}")
        for name, (lo, hi) in (("x1", self.x1_bounds), ("x2", self.x2_bounds)):
            if not lo < hi:
                raise ValueError(f"{name} bounds must be increasing, got ({lo}, {hi})")


# ---------------------------------------------------------------------------
# vectorised core (states as (n, 2) arrays)
# ---------------------------------------------------------------------------


def reward_many(xs: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    gx, gy = cfg.goal
    return -cfg.reward_scale * np.hypot(xs[..., 0] - gx, xs[..., 1] - gy)


def safety_many(xs: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Signed distance to the obstacle set: min over discs of (dist - radius)."""
    xs = np.asarray(xs, dtype=np.float64)
    margin = np.full(xs.shape[:-1], np.inf)
    for cx, cy in cfg.obstacles:
        d = np.hypot(xs[..., 0] - cx, xs[..., 1] - cy) - cfg.obstacle_radius
        margin = np.minimum(margin, d)
    return margin


def dynamics_many(xs: np.ndarray, acts: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Raw dynamics map, unclamped and without the action-norm check."""
    xs = np.asarray(xs, dtype=np.float64)
    acts = np.asarray(acts, dtype=np.float64)
    out = np.empty_like(xs)
    out[..., 0] = xs[..., 0] + (acts[..., 0] + 2.0 - 0.5 * xs[..., 1] ** 2) * cfg.dt
    out[..., 1] = xs[..., 1] + acts[..., 1] * cfg.dt
    return out


def step_many(xs: np.ndarray, acts: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Checked, box-clamped transition for a batch of states/actions."""
    acts = np.asarray(acts, dtype=np.float64)
    sq = acts[..., 0] ** 2 + acts[..., 1] ** 2
    if np.any(sq > 1.0 + ACTION_NORM_TOL):
        worst = float(np.sqrt(np.max(sq)))
        raise ValueError(f"action norm {worst:.12f} exceeds the unit bound")
    nxt = dynamics_many(xs, acts, cfg)
    np.clip(nxt[..., 0], cfg.x1_bounds[0], cfg.x1_bounds[1], out=nxt[..., 0])
    np.clip(nxt[..., 1], cfg.x2_bounds[0], cfg.x2_bounds[1], out=nxt[..., 1])
    return nxt


def sample_disc_actions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform samples from the closed unit disc (radius sqrt(u), angle uniform)."""
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    radius = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=-1)


# ---------------------------------------------------------------------------
# scalar wrappers
# ---------------------------------------------------------------------------


def _as_row(s: State) -> np.ndarray:
    return np.array([[s.x1, s.x2]], dtype=np.float64)


def reward(s: State, cfg: EnvConfig) -> float:
    return float(reward_many(_as_row(s), cfg)[0])


def safety(s: State, cfg: EnvConfig) -> float:
    return float(safety_many(_as_row(s), cfg)[0])


def dynamics(s: State, a: Action, cfg: EnvConfig) -> State:
    """Unchecked raw dynamics; permits norm-violating actions for analysis."""
    nxt = dynamics_many(_as_row(s), np.array([[a.a1, a.a2]]), cfg)[0]
    return State(float(nxt[0]), float(nxt[1]))


def step(
    s: State, a: Action, cfg: EnvConfig, step_index: int = 0
) -> tuple[State, float, float, bool]:
    """One transition.

    Returns (next_state, reward, margin, done).  Reward and margin are
    those of the pre-step state s.  done is derived from the caller's
    step counter: true once episode_length transitions have happened.
    """
    nxt = step_many(_as_row(s), np.array([[a.a1, a.a2]]), cfg)[0]
    return (
        State(float(nxt[0]), float(nxt[1])),
        reward(s, cfg),
        safety(s, cfg),
        step_index + 1 >= cfg.episode_length,
    )


def step_augmented(aug: AugmentedState, a: Action, cfg: EnvConfig) -> AugmentedState:
    """Transition of (state, z); the budget update is z' = (z - r(x)) / gamma."""
    if not np.isfinite(aug.z):
        raise ValueError(f"augmented state has non-finite z: {aug.z}")
    nxt, r, _, _ = step(aug.state, a, cfg)
    return AugmentedState(nxt, (aug.z - r) / cfg.gamma)
