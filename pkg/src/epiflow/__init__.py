"""Safe offline RL on a budget-augmented state space.

The pipeline: generate an offline dataset from the boat navigation
task, fit reachability-style value functions over (state, budget)
pairs, extract the largest feasible budget per state by bisection, and
distill a flow-matching policy tilted toward high-advantage actions.
"""

from .boat import EnvConfig, State, Action, AugmentedState, step, step_augmented
from .data import OfflineDataset, generate, load, save, sample_batch
from .nets import MLP, Adam, TargetCopy, expectile_loss, load_net, save_net
from .tabular import (
    TabularMDP,
    EpigraphGrid,
    brute_force_constrained_value,
    recover_value,
    safe_invariant_set,
    value_iteration_epigraph,
)
from .threshold import ThresholdConfig, ThresholdStatus, z_star, z_star_batch
from .values import ValueBundle, ValueTrainConfig, TrainingDiverged, train, load_bundle, save_bundle
from .policy import (
    AdvantageEvaluator,
    FlowPolicy,
    PolicyTrainConfig,
    guidance_weight,
    load_policy,
    path_point,
    sample_action,
    save_policy,
    train_policy,
)
from .evaluation import EvalConfig, EvalReport, rollout, rollout_policy
from .config import RunConfig, load_run_config, parse_run_config, serialize_run_config

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Adam",
    "AdvantageEvaluator",
    "AugmentedState",
    "EnvConfig",
    "EpigraphGrid",
    "EvalConfig",
    "EvalReport",
    "FlowPolicy",
    "MLP",
    "OfflineDataset",
    "PolicyTrainConfig",
    "RunConfig",
    "State",
    "TabularMDP",
    "TargetCopy",
    "ThresholdConfig",
    "ThresholdStatus",
    "TrainingDiverged",
    "ValueBundle",
    "ValueTrainConfig",
    "brute_force_constrained_value",
    "expectile_loss",
    "generate",
    "guidance_weight",
    "load",
    "load_bundle",
    "load_net",
    "load_policy",
    "load_run_config",
    "parse_run_config",
    "path_point",
    "recover_value",
    "rollout",
    "rollout_policy",
    "safe_invariant_set",
    "sample_action",
    "sample_batch",
    "save",
    "save_bundle",
    "save_net",
    "save_policy",
    "serialize_run_config",
    "step",
    "step_augmented",
    "train",
    "train_policy",
    "value_iteration_epigraph",
    "z_star",
    "z_star_batch",
]
