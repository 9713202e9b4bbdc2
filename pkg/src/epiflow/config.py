"""Plain-text run configuration with one section per pipeline stage.

Every key has a default matching the boat setup, so an empty file (or
no file at all) configures the full-scale pipeline.  Unknown sections
or keys are rejected with an exhaustive list rather than one at a
time.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass

from .boat import EnvConfig
from .evaluation import EvalConfig
from .policy import PolicyTrainConfig
from .values import ValueTrainConfig

_ENV_KEYS = (
    "dt",
    "gamma",
    "goal_x",
    "goal_y",
    "reward_scale",
    "obstacle1_x",
    "obstacle1_y",
    "obstacle2_x",
    "obstacle2_y",
    "obstacle_radius",
    "episode_length",
    "x1_min",
    "x1_max",
    "x2_min",
    "x2_max",
)
_DATASET_KEYS = ("n_traj", "horizon", "seed")
_VALUES_KEYS = ("tau", "lam", "batch", "steps", "lr", "rho", "hidden")
_POLICY_KEYS = (
    "alpha",
    "steps",
    "batch",
    "lr",
    "hidden",
    "integration_steps",
    "candidates",
    "clip_feasible",
    "clip_infeasible",
    "condition_on_z",
)
_THRESHOLD_KEYS = ("iterations",)
_EVAL_KEYS = ("n_episodes", "n_seeds", "horizon", "perturb_levels")
_RUN_KEYS = ("seed", "out_dir")

_SECTIONS = {
    "env": _ENV_KEYS,
    "dataset": _DATASET_KEYS,
    "values": _VALUES_KEYS,
    "policy": _POLICY_KEYS,
    "threshold": _THRESHOLD_KEYS,
    "eval": _EVAL_KEYS,
    "run": _RUN_KEYS,
}


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig
    n_traj: int
    traj_horizon: int
    data_seed: int
    values: ValueTrainConfig
    policy: PolicyTrainConfig
    threshold_iterations: int
    eval: EvalConfig
    seed: int
    out_dir: str

    def __post_init__(self) -> None:
        if self.n_traj < 1 or self.traj_horizon < 1:
            raise ValueError(
                f"need n_traj >= 1 and horizon >= 1, got {self.n_traj}, {self.traj_horizon}"
            )
        if self.threshold_iterations < 1:
            raise ValueError(f"threshold iterations must be >= 1, got {self.threshold_iterations}")
        if self.values.gamma != self.env.gamma:
            raise ValueError(
                f"value gamma {self.values.gamma} disagrees with env gamma {self.env.gamma}"
            )


def _parse_hidden(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parse_levels(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


def _reject_unknown(parser: configparser.ConfigParser, source: str) -> None:
    unknown: list[str] = []
    for section in parser.sections():
        if section not in _SECTIONS:
            unknown.append(f"[{section}]")
            continue
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                unknown.append(f"[{section}] {key}")
    if unknown:
        raise ValueError(f"{source}: unknown config entries: {', '.join(sorted(unknown))}")


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValueError(f"{source}: {exc}") from exc
    _reject_unknown(parser, source)

    def get(section: str, key: str, cast, default):
        if parser.has_option(section, key):
            raw = parser.get(section, key)
            try:
                return cast(raw)
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{source}: [{section}] {key} = {raw!r}: {exc}") from exc
        return default

    def getbool(section: str, key: str, default: bool) -> bool:
        if parser.has_option(section, key):
            return parser.getboolean(section, key)
        return default

    base_env = EnvConfig()
    env = EnvConfig(
        dt=get("env", "dt", float, base_env.dt),
        gamma=get("env", "gamma", float, base_env.gamma),
        goal=(
            get("env", "goal_x", float, base_env.goal[0]),
            get("env", "goal_y", float, base_env.goal[1]),
        ),
        reward_scale=get("env", "reward_scale", float, base_env.reward_scale),
        obstacles=(
            (
                get("env", "obstacle1_x", float, base_env.obstacles[0][0]),
                get("env", "obstacle1_y", float, base_env.obstacles[0][1]),
            ),
            (
                get("env", "obstacle2_x", float, base_env.obstacles[1][0]),
                get("env", "obstacle2_y", float, base_env.obstacles[1][1]),
            ),
        ),
        obstacle_radius=get("env", "obstacle_radius", float, base_env.obstacle_radius),
        episode_length=get("env", "episode_length", int, base_env.episode_length),
        x1_bounds=(
            get("env", "x1_min", float, base_env.x1_bounds[0]),
            get("env", "x1_max", float, base_env.x1_bounds[1]),
        ),
        x2_bounds=(
            get("env", "x2_min", float, base_env.x2_bounds[0]),
            get("env", "x2_max", float, base_env.x2_bounds[1]),
        ),
    )

    seed = get("run", "seed", int, 0)
    base_v = ValueTrainConfig()
    values = ValueTrainConfig(
        tau=get("values", "tau", float, base_v.tau),
        lam=get("values", "lam", float, base_v.lam),
        gamma=env.gamma,
        batch=get("values", "batch", int, base_v.batch),
        steps=get("values", "steps", int, base_v.steps),
        seed=seed,
        lr=get("values", "lr", float, base_v.lr),
        rho=get("values", "rho", float, base_v.rho),
        hidden=get("values", "hidden", _parse_hidden, base_v.hidden),
    )

    base_p = PolicyTrainConfig()
    threshold_iterations = get("threshold", "iterations", int, 32)
    policy = PolicyTrainConfig(
        alpha=get("policy", "alpha", float, base_p.alpha),
        steps=get("policy", "steps", int, base_p.steps),
        batch=get("policy", "batch", int, base_p.batch),
        lr=get("policy", "lr", float, base_p.lr),
        seed=seed,
        hidden=get("policy", "hidden", _parse_hidden, base_p.hidden),
        integration_steps=get("policy", "integration_steps", int, base_p.integration_steps),
        candidates=get("policy", "candidates", int, base_p.candidates),
        clip_feasible=get("policy", "clip_feasible", float, base_p.clip_feasible),
        clip_infeasible=get("policy", "clip_infeasible", float, base_p.clip_infeasible),
        condition_on_z=getbool("policy", "condition_on_z", base_p.condition_on_z),
        bisect_iterations=threshold_iterations,
    )

    eval_horizon = get("eval", "horizon", int, 0)
    eval_cfg = EvalConfig(
        n_episodes=get("eval", "n_episodes", int, 500),
        n_seeds=get("eval", "n_seeds", int, 5),
        horizon=eval_horizon if eval_horizon > 0 else None,
        perturb_levels=get("eval", "perturb_levels", _parse_levels, (0.05, 0.10, 0.20)),
    )

    return RunConfig(
        env=env,
        n_traj=get("dataset", "n_traj", int, 500),
        traj_horizon=get("dataset", "horizon", int, env.episode_length),
        data_seed=get("dataset", "seed", int, 0),
        values=values,
        policy=policy,
        threshold_iterations=threshold_iterations,
        eval=eval_cfg,
        seed=seed,
        out_dir=get("run", "out_dir", str, "out"),
    )


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return parse_run_config("", source="<defaults>")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config(fh.read(), source=path)


def serialize_run_config(cfg: RunConfig) -> str:
    """Emit every key explicitly so parse(serialize(c)) == c."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    env = cfg.env
    parser["env"] = {
        "dt": repr(env.dt),
        "gamma": repr(env.gamma),
        "goal_x": repr(env.goal[0]),
        "goal_y": repr(env.goal[1]),
        "reward_scale": repr(env.reward_scale),
        "obstacle1_x": repr(env.obstacles[0][0]),
        "obstacle1_y": repr(env.obstacles[0][1]),
        "obstacle2_x": repr(env.obstacles[1][0]),
        "obstacle2_y": repr(env.obstacles[1][1]),
        "obstacle_radius": repr(env.obstacle_radius),
        "episode_length": str(env.episode_length),
        "x1_min": repr(env.x1_bounds[0]),
        "x1_max": repr(env.x1_bounds[1]),
        "x2_min": repr(env.x2_bounds[0]),
        "x2_max": repr(env.x2_bounds[1]),
    }
    parser["dataset"] = {
        "n_traj": str(cfg.n_traj),
        "horizon": str(cfg.traj_horizon),
        "seed": str(cfg.data_seed),
    }
    parser["values"] = {
        "tau": repr(cfg.values.tau),
        "lam": repr(cfg.values.lam),
        "batch": str(cfg.values.batch),
        "steps": str(cfg.values.steps),
        "lr": repr(cfg.values.lr),
        "rho": repr(cfg.values.rho),
        "hidden": ",".join(str(h) for h in cfg.values.hidden),
    }
    parser["policy"] = {
        "alpha": repr(cfg.policy.alpha),
        "steps": str(cfg.policy.steps),
        "batch": str(cfg.policy.batch),
        "lr": repr(cfg.policy.lr),
        "hidden": ",".join(str(h) for h in cfg.policy.hidden),
        "integration_steps": str(cfg.policy.integration_steps),
        "candidates": str(cfg.policy.candidates),
        "clip_feasible": repr(cfg.policy.clip_feasible),
        "clip_infeasible": repr(cfg.policy.clip_infeasible),
        "condition_on_z": str(cfg.policy.condition_on_z).lower(),
    }
    parser["threshold"] = {"iterations": str(cfg.threshold_iterations)}
    parser["eval"] = {
        "n_episodes": str(cfg.eval.n_episodes),
        "n_seeds": str(cfg.eval.n_seeds),
        "horizon": str(cfg.eval.horizon or 0),
        "perturb_levels": ",".join(repr(p) for p in cfg.eval.perturb_levels),
    }
    parser["run"] = {"seed": str(cfg.seed), "out_dir": cfg.out_dir}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
