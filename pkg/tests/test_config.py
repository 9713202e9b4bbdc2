"""Run configuration: defaults, round trips, exhaustive rejection."""

import pytest

from epiflow.boat import EnvConfig
from epiflow.config import (
    RunConfig,
    load_run_config,
    parse_run_config,
    serialize_run_config,
)
from epiflow.evaluation import EvalConfig
from epiflow.policy import PolicyTrainConfig
from epiflow.values import ValueTrainConfig


def test_empty_text_yields_full_scale_defaults():
    cfg = parse_run_config("")
    assert cfg.env == EnvConfig()
    assert cfg.n_traj == 500
    assert cfg.traj_horizon == cfg.env.episode_length
    assert cfg.data_seed == 0
    assert cfg.values == ValueTrainConfig()
    assert cfg.policy == PolicyTrainConfig()
    assert cfg.threshold_iterations == 32
    assert cfg.eval == EvalConfig()
    assert cfg.eval.horizon is None
    assert cfg.seed == 0
    assert cfg.out_dir == "out"


def test_missing_file_path_means_defaults():
    assert load_run_config(None) == parse_run_config("")


def test_round_trip_preserves_everything():
    text = """
[env]
dt = 0.01
gamma = 0.97
goal_x = 0.3
goal_y = -0.1
obstacle_radius = 0.35
episode_length = 123

[dataset]
n_traj = 17
horizon = 88
seed = 4

[values]
tau = 0.8
lam = 0.7
batch = 77
steps = 321
lr = 0.001
rho = 0.02
hidden = 33,44

[policy]
alpha = 3.5
steps = 55
hidden = 12
condition_on_z = true
candidates = 13

[threshold]
iterations = 21

[eval]
n_episodes = 9
n_seeds = 2
horizon = 50
perturb_levels = 0.01,0.3

[run]
seed = 11
out_dir = runs/exp1
"""
    cfg = parse_run_config(text)
    assert cfg.env.gamma == 0.97
    assert cfg.values.gamma == 0.97  # forced to match the env
    assert cfg.values.hidden == (33, 44)
    assert cfg.policy.condition_on_z is True
    assert cfg.policy.bisect_iterations == 21
    assert cfg.eval.horizon == 50
    assert cfg.eval.perturb_levels == (0.01, 0.3)
    assert parse_run_config(serialize_run_config(cfg)) == cfg


def test_round_trip_of_defaults():
    cfg = parse_run_config("")
    assert parse_run_config(serialize_run_config(cfg)) == cfg


def test_unknown_entries_reported_exhaustively():
    text = """
[environment]
gamma = 0.5

[env]
gravity = 9.8

[run]
extra = 1
seed = 3
"""
    with pytest.raises(ValueError) as err:
        parse_run_config(text, source="bad.ini")
    msg = str(err.value)
    assert msg.startswith("bad.ini: unknown config entries:")
    assert "[environment]" in msg
    assert "[env] gravity" in msg
    assert "[run] extra" in msg


def test_seed_propagates_to_both_trainers():
    cfg = parse_run_config("[run]\nseed = 7\n")
    assert cfg.seed == 7
    assert cfg.values.seed == 7
    assert cfg.policy.seed == 7


def test_bad_value_names_section_and_key():
    with pytest.raises(ValueError, match=r"\[values\] tau"):
        parse_run_config("[values]\ntau = hello\n")


def test_trailing_comma_in_hidden_is_fine():
    cfg = parse_run_config("[values]\nhidden = 32,\n")
    assert cfg.values.hidden == (32,)


def test_zero_eval_horizon_means_episode_length():
    cfg = parse_run_config("[eval]\nhorizon = 0\n")
    assert cfg.eval.horizon is None


def test_syntax_error_is_wrapped():
    with pytest.raises(ValueError, match="notes.ini"):
        parse_run_config("just some prose\n", source="notes.ini")


def test_run_config_cross_validation():
    base = parse_run_config("")
    with pytest.raises(ValueError, match="disagrees"):
        RunConfig(
            env=base.env,
            n_traj=base.n_traj,
            traj_horizon=base.traj_horizon,
            data_seed=0,
            values=ValueTrainConfig(gamma=0.9),
            policy=base.policy,
            threshold_iterations=32,
            eval=base.eval,
            seed=0,
            out_dir="out",
        )
    with pytest.raises(ValueError, match="n_traj"):
        parse_run_config("[dataset]\nn_traj = 0\n")
    with pytest.raises(ValueError, match="iterations"):
        parse_run_config("[threshold]\niterations = 0\n")
