"""Rollout harness, ablation sweeps, and report writers.

Episodes are independent, so the harness simulates a whole batch in
lockstep: one vectorized env step and one batched policy call per
timestep.  Randomness is drawn from per-episode substreams keyed by
(seed, episode index), which makes every report a deterministic
function of its inputs; only the wall-clock timing fields vary between
runs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .boat import EnvConfig, reward_many, safety_many, step_many
from .data import OfflineDataset
from .policy import (
    AdvantageEvaluator,
    FlowPolicy,
    PolicyTrainConfig,
    integrate_field,
    project_disc,
    train_policy,
)
from .values import ValueBundle, ValueTrainConfig, train

TAU_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)
LAMBDA_GRID = (0.1, 0.25, 0.5, 1.0)
N_GRID = (1, 2, 4, 8, 16, 32, 64, 128)

# Actor signature: (states (m,2), per-episode rngs) -> actions (m,2).
Actor = Callable[[np.ndarray, Sequence[np.random.Generator]], np.ndarray]


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 500
    n_seeds: int = 5
    horizon: int | None = None
    perturb_levels: tuple[float, ...] = (0.05, 0.10, 0.20)
    candidates: int | None = None

    def __post_init__(self) -> None:
        if self.n_episodes < 1:
            raise ValueError(f"n_episodes must be >= 1, got {self.n_episodes}")
        if self.n_seeds < 1:
            raise ValueError(f"n_seeds must be >= 1, got {self.n_seeds}")
        for lev in self.perturb_levels:
            if not 0.0 <= lev < 1.0:
                raise ValueError(f"perturbation fraction {lev} outside [0, 1)")


@dataclass(frozen=True)
class SeedResult:
    seed: int
    mean_reward: float
    sd_reward: float
    safety_rate: float
    mean_cost: float


@dataclass
class EvalReport:
    per_seed: list[SeedResult]
    mean_reward: float
    sd_reward: float
    safety_rate: float
    mean_cost: float
    time_per_action: float = 0.0
    episode_rewards: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    episode_costs: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    def core_dict(self) -> dict:
        """Everything except wall-clock timing; deterministic given inputs."""
        return {
            "mean_reward": self.mean_reward,
            "sd_reward": self.sd_reward,
            "safety_rate": self.safety_rate,
            "mean_cost": self.mean_cost,
            "per_seed": [dataclasses.asdict(s) for s in self.per_seed],
        }

    def to_json(self) -> str:
        out = self.core_dict()
        out["time_per_action"] = self.time_per_action
        return json.dumps(out, sort_keys=True)


def _sd(values: np.ndarray) -> float:
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


def sample_safe_starts(env: EnvConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws over the state box, rejecting any start with ell(x) < 0."""
    out = np.empty((n, 2))
    have = 0
    while have < n:
        cand = np.column_stack(
            [
                rng.uniform(env.x1_bounds[0], env.x1_bounds[1], size=n),
                rng.uniform(env.x2_bounds[0], env.x2_bounds[1], size=n),
            ]
        )
        ok = cand[safety_many(cand, env) >= 0.0]
        take = min(n - have, ok.shape[0])
        out[have : have + take] = ok[:take]
        have += take
    return out


def policy_actor(
    policy: FlowPolicy,
    adv_eval: AdvantageEvaluator,
    candidates: int | None = None,
    env: EnvConfig | None = None,
) -> Actor:
    """Batched best-of-N flow sampler with per-episode noise streams.

    When the environment is given, candidates are ranked through its
    one-step dynamics; otherwise by the learned Q heads.
    """
    n_cand = policy.candidates if candidates is None else int(candidates)
    need_z = n_cand > 1 or policy.condition_on_z

    def act(states: np.ndarray, rngs: Sequence[np.random.Generator]) -> np.ndarray:
        m = states.shape[0]
        zs = adv_eval.z_star_batch(states) if need_z else None
        base = np.stack([rngs[i].standard_normal((n_cand, 2)) for i in range(m)])
        conds = np.repeat(policy.conds_for(states, zs), n_cand, axis=0)
        flat = integrate_field(policy.net, base.reshape(m * n_cand, 2), conds, policy.integration_steps)
        flat = project_disc(flat)
        if n_cand == 1:
            return flat
        assert zs is not None
        scores = adv_eval.candidate_scores(
            np.repeat(states, n_cand, axis=0), np.repeat(zs, n_cand), flat, env
        ).reshape(m, n_cand)
        return flat.reshape(m, n_cand, 2)[np.arange(m), scores.argmax(axis=1)]

    return act


def rollout_actor(
    actor: Actor,
    env: EnvConfig,
    *,
    n_episodes: int,
    horizon: int | None = None,
    seed: int = 0,
    perturb_sigma: float = 0.0,
    starts: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Simulate episodes in lockstep.

    Returns (episode_rewards, episode_costs, seconds_per_action).  Cost
    is the count of timesteps spent in states with ell(x) < 0; rewards
    and violations are attributed to the pre-step state, matching the
    dataset generator.
    """
    steps = env.episode_length if horizon is None else int(horizon)
    rngs = [
        np.random.default_rng(np.random.SeedSequence([seed, i]))
        for i in range(n_episodes)
    ]
    if starts is None:
        states = np.stack([sample_safe_starts(env, 1, rngs[i])[0] for i in range(n_episodes)])
    else:
        states = np.array(starts, dtype=np.float64)
        if states.shape != (n_episodes, 2):
            raise ValueError(f"starts shape {states.shape} != ({n_episodes}, 2)")
    rewards = np.zeros(n_episodes)
    costs = np.zeros(n_episodes)
    act_time = 0.0
    for _ in range(steps):
        t0 = time.perf_counter()
        acts = actor(states, rngs)
        act_time += time.perf_counter() - t0
        if perturb_sigma > 0.0:
            noise = np.stack([rngs[i].standard_normal(2) for i in range(n_episodes)])
            acts = project_disc(acts + perturb_sigma * noise)
        rewards += reward_many(states, env)
        costs += safety_many(states, env) < 0.0
        states = step_many(states, acts, env)
    return rewards, costs, act_time / (n_episodes * steps)


def _seed_result(seed: int, rewards: np.ndarray, costs: np.ndarray) -> SeedResult:
    return SeedResult(
        seed=seed,
        mean_reward=float(rewards.mean()),
        sd_reward=_sd(rewards),
        safety_rate=float(100.0 * np.mean(costs == 0)),
        mean_cost=float(costs.mean()),
    )


def rollout(
    actor: Actor,
    env: EnvConfig,
    cfg: EvalConfig,
    base_seed: int = 0,
    *,
    perturb_sigma: float = 0.0,
    starts: np.ndarray | None = None,
) -> EvalReport:
    """Run cfg.n_seeds independent episode batches and aggregate."""
    all_r: list[np.ndarray] = []
    all_c: list[np.ndarray] = []
    per_seed: list[SeedResult] = []
    times: list[float] = []
    for s in range(cfg.n_seeds):
        r, c, tpa = rollout_actor(
            actor,
            env,
            n_episodes=cfg.n_episodes,
            horizon=cfg.horizon,
            seed=base_seed * 7919 + s,
            perturb_sigma=perturb_sigma,
            starts=starts,
        )
        per_seed.append(_seed_result(base_seed * 7919 + s, r, c))
        all_r.append(r)
        all_c.append(c)
        times.append(tpa)
    rewards = np.concatenate(all_r)
    costs = np.concatenate(all_c)
    return EvalReport(
        per_seed=per_seed,
        mean_reward=float(rewards.mean()),
        sd_reward=_sd(rewards),
        safety_rate=float(100.0 * np.mean(costs == 0)),
        mean_cost=float(costs.mean()),
        time_per_action=float(np.median(times)),
        episode_rewards=rewards,
        episode_costs=costs,
    )


def rollout_policy(
    policy: FlowPolicy,
    adv_eval: AdvantageEvaluator,
    env: EnvConfig,
    cfg: EvalConfig,
    base_seed: int = 0,
    *,
    perturb_sigma: float = 0.0,
) -> EvalReport:
    actor = policy_actor(policy, adv_eval, cfg.candidates, env)
    return rollout(actor, env, cfg, base_seed, perturb_sigma=perturb_sigma)


def perturbation_sweep(
    policy: FlowPolicy,
    adv_eval: AdvantageEvaluator,
    env: EnvConfig,
    cfg: EvalConfig,
    base_seed: int = 0,
) -> list[dict]:
    """Evaluate under additive Gaussian action noise, sigma = level * bound.

    The unperturbed case (level 0) is always run first and rewards are
    reported relative to it.
    """
    rows: list[dict] = []
    baseline = None
    for level in (0.0, *cfg.perturb_levels):
        rep = rollout_policy(
            policy, adv_eval, env, cfg, base_seed, perturb_sigma=level * 1.0
        )
        if baseline is None:
            baseline = rep.mean_reward
        rel = 100.0 * (rep.mean_reward / baseline) if baseline != 0.0 else float("nan")
        rows.append(
            {
                "level": level,
                "mean_reward": rep.mean_reward,
                "relative_reward_pct": rel,
                "safety_rate": rep.safety_rate,
                "mean_cost": rep.mean_cost,
            }
        )
    return rows


def _ablation_row(key: str, value, report: EvalReport | None, error: str | None) -> dict:
    row = {key: value, "error": error}
    if report is not None:
        row.update(
            mean_reward=report.mean_reward,
            sd_reward=report.sd_reward,
            safety_rate=report.safety_rate,
            mean_cost=report.mean_cost,
        )
    return row


def tau_sweep(
    ds: OfflineDataset,
    value_cfg: ValueTrainConfig,
    policy_cfg: PolicyTrainConfig,
    env: EnvConfig,
    eval_cfg: EvalConfig,
    base_seed: int = 0,
    grid: Sequence[float] = TAU_GRID,
) -> list[dict]:
    """Retrain the value stack and policy per expectile level."""
    rows = []
    for tau in grid:
        try:
            bundle = train(ds, dataclasses.replace(value_cfg, tau=tau))
            policy = train_policy(ds, bundle, policy_cfg)
            rep = rollout_policy(policy, AdvantageEvaluator(bundle), env, eval_cfg, base_seed)
            rows.append(_ablation_row("tau", tau, rep, None))
        except Exception as exc:  # recorded per cell, sweep continues
            rows.append(_ablation_row("tau", tau, None, f"{type(exc).__name__}: {exc}"))
    return rows


def lambda_sweep(
    ds: OfflineDataset,
    value_cfg: ValueTrainConfig,
    policy_cfg: PolicyTrainConfig,
    env: EnvConfig,
    eval_cfg: EvalConfig,
    base_seed: int = 0,
    grid: Sequence[float] = LAMBDA_GRID,
) -> list[dict]:
    """Retrain per regularizer strength."""
    rows = []
    for lam in grid:
        try:
            bundle = train(ds, dataclasses.replace(value_cfg, lam=lam))
            policy = train_policy(ds, bundle, policy_cfg)
            rep = rollout_policy(policy, AdvantageEvaluator(bundle), env, eval_cfg, base_seed)
            rows.append(_ablation_row("lam", lam, rep, None))
        except Exception as exc:
            rows.append(_ablation_row("lam", lam, None, f"{type(exc).__name__}: {exc}"))
    return rows


def time_per_action(
    policy: FlowPolicy,
    adv_eval: AdvantageEvaluator,
    states: np.ndarray,
    candidates: int,
    seed: int = 0,
    repeats: int = 3,
    env: EnvConfig | None = None,
) -> float:
    """Median wall-clock seconds per selected action on a fixed state batch."""
    actor = policy_actor(policy, adv_eval, candidates, env)
    samples = []
    for rep in range(repeats):
        rngs = [
            np.random.default_rng(np.random.SeedSequence([seed, rep, i]))
            for i in range(states.shape[0])
        ]
        t0 = time.perf_counter()
        actor(states, rngs)
        samples.append((time.perf_counter() - t0) / states.shape[0])
    return float(np.median(samples))


def n_sweep(
    policy: FlowPolicy,
    adv_eval: AdvantageEvaluator,
    env: EnvConfig,
    eval_cfg: EvalConfig,
    base_seed: int = 0,
    grid: Sequence[int] = N_GRID,
    timing_batch: int = 64,
) -> list[dict]:
    """Re-evaluate the same policy with different candidate counts."""
    rng = np.random.default_rng(np.random.SeedSequence([base_seed, 777]))
    timing_states = sample_safe_starts(env, timing_batch, rng)
    rows = []
    for n in grid:
        try:
            cfg_n = dataclasses.replace(eval_cfg, candidates=int(n))
            rep = rollout_policy(policy, adv_eval, env, cfg_n, base_seed)
            row = _ablation_row("n", int(n), rep, None)
            row["time_per_action"] = time_per_action(
                policy, adv_eval, timing_states, int(n), seed=base_seed, env=env
            )
            rows.append(row)
        except Exception as exc:
            rows.append(_ablation_row("n", int(n), None, f"{type(exc).__name__}: {exc}"))
    return rows


# ---------------------------------------------------------------------------
# z sensitivity
# ---------------------------------------------------------------------------


def state_mesh(env: EnvConfig, nx: int = 41, ny: int = 41) -> np.ndarray:
    """Row-major (nx*ny, 2) grid over the state box."""
    x1 = np.linspace(env.x1_bounds[0], env.x1_bounds[1], nx)
    x2 = np.linspace(env.x2_bounds[0], env.x2_bounds[1], ny)
    g1, g2 = np.meshgrid(x1, x2, indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel()])


def z_variation(v_hat_eval, states: np.ndarray, z_lo: float, z_hi: float) -> float:
    """Mean drop of the value head across the budget range on a state mesh."""
    lo = v_hat_eval(states, np.full(states.shape[0], z_lo))
    hi = v_hat_eval(states, np.full(states.shape[0], z_hi))
    return float(np.mean(lo - hi))


def z_sensitivity_report(
    bundle: ValueBundle,
    env: EnvConfig,
    nx: int = 41,
    ny: int = 41,
    z_grid: Sequence[float] | None = None,
) -> dict:
    """Value meshes at several budgets plus the scalar variation statistic."""
    states = state_mesh(env, nx, ny)
    if z_grid is None:
        z_grid = tuple(np.linspace(bundle.z_min, bundle.z_max, 5))
    meshes = {}
    for z in z_grid:
        vals = bundle.v_hat_eval(states, np.full(states.shape[0], float(z)))
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite values on the z={z} mesh")
        meshes[float(z)] = vals.reshape(nx, ny)
    stat = z_variation(bundle.v_hat_eval, states, bundle.z_min, bundle.z_max)
    return {"variation": stat, "z_grid": [float(z) for z in z_grid], "meshes": meshes, "states": states}


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------


def write_rows_csv(path: str, rows: list[dict]) -> None:
    """One CSV row per dict; the union of keys, in first-seen order."""
    if not rows:
        raise ValueError("no rows to write")
    header: list[str] = []
    for row in rows:
        for key in row:
            if key not in header:
                header.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_report_csv(path: str, report: EvalReport, label: str = "all") -> None:
    rows = [
        {
            "config": label,
            "seed": s.seed,
            "mean_reward": s.mean_reward,
            "sd_reward": s.sd_reward,
            "safety_rate": s.safety_rate,
            "mean_cost": s.mean_cost,
        }
        for s in report.per_seed
    ]
    write_rows_csv(path, rows)


def write_mesh_csv(path: str, mesh: np.ndarray) -> None:
    np.savetxt(path, mesh, delimiter=",")
