"""Command-line pipeline: data, values, policy, evaluation, ablations.

Stage outputs land in the run's output directory together with a
manifest recording the exact config text, its hash, and content
checksums of inputs and outputs.  Commands are idempotent: identical
inputs produce byte-identical artifacts (wall-clock timing is kept in
a separate, unhashed file).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import evaluation as ev
from .config import RunConfig, load_run_config, serialize_run_config
from .policy import AdvantageEvaluator, load_policy, save_policy, train_policy
from .tabular import (
    brute_force_constrained_value,
    load_mdp_config,
    recover_value,
    value_iteration_epigraph,
)
from .values import load_bundle, save_bundle, train

DATASET_FILE = "dataset.bin"
BUNDLE_FILE = "values.bundle"
POLICY_FILE = "policy.bin"


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: str, command: str, cfg: RunConfig, inputs: list[str], outputs: list[str]) -> None:
    text = serialize_run_config(cfg)
    manifest = {
        "command": command,
        "config": text,
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "seed": cfg.seed,
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs},
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
    }
    path = os.path.join(out_dir, f"{command}.manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _need(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {what}: {path} (run the upstream stage first)")
    return path


def cmd_gen_data(cfg: RunConfig) -> int:
    ds = data_mod.generate(cfg.env, cfg.n_traj, cfg.traj_horizon, cfg.data_seed)
    out = os.path.join(cfg.out_dir, DATASET_FILE)
    data_mod.save(ds, out)
    _write_manifest(cfg.out_dir, "gen-data", cfg, [], [out])
    print(f"wrote {len(ds)} transitions to {out}")
    return 0


def cmd_train_values(cfg: RunConfig) -> int:
    ds_path = _need(os.path.join(cfg.out_dir, DATASET_FILE), "dataset")
    ds = data_mod.load(ds_path)
    bundle = train(ds, cfg.values)
    out = os.path.join(cfg.out_dir, BUNDLE_FILE)
    save_bundle(bundle, out, cfg.values)
    hist = os.path.join(cfg.out_dir, "values_history.csv")
    ev.write_rows_csv(hist, bundle.history)
    _write_manifest(cfg.out_dir, "train-values", cfg, [ds_path], [out, hist])
    print(f"wrote value bundle to {out} ({len(bundle.history)} logged steps)")
    return 0


def cmd_train_policy(cfg: RunConfig) -> int:
    ds_path = _need(os.path.join(cfg.out_dir, DATASET_FILE), "dataset")
    bundle_path = _need(os.path.join(cfg.out_dir, BUNDLE_FILE), "value bundle")
    ds = data_mod.load(ds_path)
    bundle, _ = load_bundle(bundle_path)
    policy = train_policy(ds, bundle, cfg.policy)
    out = os.path.join(cfg.out_dir, POLICY_FILE)
    save_policy(policy, out)
    _write_manifest(cfg.out_dir, "train-policy", cfg, [ds_path, bundle_path], [out])
    print(f"wrote policy to {out}")
    return 0


def _load_policy_stack(cfg: RunConfig):
    bundle_path = _need(os.path.join(cfg.out_dir, BUNDLE_FILE), "value bundle")
    policy_path = _need(os.path.join(cfg.out_dir, POLICY_FILE), "policy")
    bundle, _ = load_bundle(bundle_path)
    policy = load_policy(policy_path)
    return bundle, policy, [bundle_path, policy_path]


def cmd_eval(cfg: RunConfig) -> int:
    bundle, policy, inputs = _load_policy_stack(cfg)
    report = ev.rollout_policy(policy, AdvantageEvaluator(bundle), cfg.env, cfg.eval, cfg.seed)
    csv_path = os.path.join(cfg.out_dir, "eval_report.csv")
    ev.write_report_csv(csv_path, report)
    summary_path = os.path.join(cfg.out_dir, "eval_summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(report.core_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    timing_path = os.path.join(cfg.out_dir, "eval_timing.json")
    with open(timing_path, "w", encoding="utf-8") as fh:
        json.dump({"time_per_action": report.time_per_action}, fh)
        fh.write("\n")
    _write_manifest(cfg.out_dir, "eval", cfg, inputs, [csv_path, summary_path])
    print(
        f"reward {report.mean_reward:.3f} +- {report.sd_reward:.3f}  "
        f"safety {report.safety_rate:.1f}%  cost {report.mean_cost:.3f}"
    )
    return 0


def cmd_ablate(cfg: RunConfig, what: str) -> int:
    if what in ("tau", "lambda"):
        ds_path = _need(os.path.join(cfg.out_dir, DATASET_FILE), "dataset")
        ds = data_mod.load(ds_path)
        sweep = ev.tau_sweep if what == "tau" else ev.lambda_sweep
        rows = sweep(ds, cfg.values, cfg.policy, cfg.env, cfg.eval, cfg.seed)
        out = os.path.join(cfg.out_dir, f"ablate_{what}.csv")
        ev.write_rows_csv(out, rows)
        _write_manifest(cfg.out_dir, f"ablate-{what}", cfg, [ds_path], [out])
    elif what == "n":
        bundle, policy, inputs = _load_policy_stack(cfg)
        rows = ev.n_sweep(policy, AdvantageEvaluator(bundle), cfg.env, cfg.eval, cfg.seed)
        out = os.path.join(cfg.out_dir, "ablate_n.csv")
        ev.write_rows_csv(out, rows)
        _write_manifest(cfg.out_dir, "ablate-n", cfg, inputs, [out])
    elif what == "perturb":
        bundle, policy, inputs = _load_policy_stack(cfg)
        rows = ev.perturbation_sweep(policy, AdvantageEvaluator(bundle), cfg.env, cfg.eval, cfg.seed)
        out = os.path.join(cfg.out_dir, "ablate_perturb.csv")
        ev.write_rows_csv(out, rows)
        _write_manifest(cfg.out_dir, "ablate-perturb", cfg, inputs, [out])
    elif what == "zsens":
        bundle_path = _need(os.path.join(cfg.out_dir, BUNDLE_FILE), "value bundle")
        bundle, _ = load_bundle(bundle_path)
        rep = ev.z_sensitivity_report(bundle, cfg.env)
        outputs = []
        for z, mesh in rep["meshes"].items():
            path = os.path.join(cfg.out_dir, f"zsens_mesh_{z:+.4f}.csv")
            ev.write_mesh_csv(path, mesh)
            outputs.append(path)
        summary = os.path.join(cfg.out_dir, "zsens_summary.json")
        with open(summary, "w", encoding="utf-8") as fh:
            json.dump({"variation": rep["variation"], "z_grid": rep["z_grid"]}, fh, sort_keys=True)
            fh.write("\n")
        outputs.append(summary)
        _write_manifest(cfg.out_dir, "ablate-zsens", cfg, [bundle_path], outputs)
        print(f"z variation statistic: {rep['variation']:.6f}")
    else:
        raise ValueError(f"unknown ablation {what!r}")
    return 0


def cmd_oracle(mdp_path: str) -> int:
    mdp = load_mdp_config(_need(mdp_path, "MDP config"))
    bf = brute_force_constrained_value(mdp)
    grid = value_iteration_epigraph(mdp)
    rec, saturated = recover_value(grid)
    print(f"states {mdp.n_states} actions {mdp.n_actions} gamma {mdp.gamma}")
    both = np.isfinite(bf) & np.isfinite(rec)
    agree = bool(np.array_equal(np.isfinite(bf), np.isfinite(rec)))
    if np.any(both):
        gap = float(np.max(np.abs(bf[both] - rec[both])))
        cells = gap / grid.spacing
        print(f"max discrepancy {gap:.6g} ({cells:.2f} grid cells, spacing {grid.spacing:.6g})")
    else:
        print("no feasible states; both routes report infeasible everywhere")
    print(f"feasible sets agree: {'yes' if agree else 'NO'}")
    if np.any(saturated & np.isfinite(rec)):
        print(f"saturated recoveries: {int(np.sum(saturated))}")
    return 0 if agree else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epiflow", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="run config path (defaults apply if omitted)")
    common.add_argument("--out", default=None, help="output directory override")
    common.add_argument("--seed", type=int, default=None, help="global seed override")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap (or EPIFLOW_THREADS)")
    common.add_argument("--deterministic", action="store_true", help="force single-threaded math")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-values", "train-policy", "eval"):
        sub.add_parser(name, parents=[common])
    ablate = sub.add_parser("ablate", parents=[common])
    ablate.add_argument("what", choices=("tau", "lambda", "n", "perturb", "zsens"))
    oracle = sub.add_parser("oracle")
    oracle.add_argument("mdp", help="tabular MDP config file")
    return parser


def _apply_threads(args) -> None:
    threads = args.threads
    if threads is None:
        env = os.environ.get("EPIFLOW_THREADS")
        threads = int(env) if env else None
    if args.deterministic:
        threads = 1
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(threads)
        except ImportError:
            pass  # env vars still cover subprocesses and late-loading backends


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "oracle":
            return cmd_oracle(args.mdp)
        _apply_threads(args)
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(
                cfg,
                seed=args.seed,
                values=dataclasses.replace(cfg.values, seed=args.seed),
                policy=dataclasses.replace(cfg.policy, seed=args.seed),
            )
        if args.out is not None:
            cfg = dataclasses.replace(cfg, out_dir=args.out)
        os.makedirs(cfg.out_dir, exist_ok=True)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train-values":
            return cmd_train_values(cfg)
        if args.command == "train-policy":
            return cmd_train_policy(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.what)
        raise AssertionError(f"unhandled command {args.command}")
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
