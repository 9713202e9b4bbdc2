"""Weighted flow-matching policy over the unit action disc.

Training regresses a velocity field onto straight-line paths from
standard-normal noise to behavior actions, weighting each sample by the
exponentially tilted advantage of its logged transition under the
frozen value bundle.  Sampling integrates the field with explicit
Euler, projects onto the action disc, and keeps the best of N
candidates at the state's extracted budget z*(x): scored through the
environment's one-step dynamics when they are available, and by the
learned Q heads otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .boat import EnvConfig, reward_many, step_many
from .data import OfflineDataset
from .nets import MLP, Adam, CheckpointError, net_from_bytes, net_to_bytes
from .threshold import ThresholdConfig, z_star_batch
from .values import TrainingDiverged, ValueBundle

POLICY_MAGIC = "epiflow-policy"
POLICY_VERSION = 1


@dataclass(frozen=True)
class PolicyTrainConfig:
    # Guidance strength is calibrated to the advantage spread the critic
    # actually produces on the boat task (sd ~0.03 in return units), so the
    # exponential tilt reweights meaningfully without saturating the clip.
    alpha: float = 50.0
    steps: int = 100_000
    batch: int = 256
    lr: float = 3e-4
    seed: int = 0
    hidden: tuple[int, ...] = (256, 256)
    integration_steps: int = 5
    candidates: int = 8
    clip_feasible: float = 100.0
    clip_infeasible: float = 150.0
    condition_on_z: bool = False
    bisect_iterations: int = 32

    def __post_init__(self) -> None:
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.integration_steps < 1 or self.candidates < 1:
            raise ValueError(
                f"need integration_steps >= 1 and candidates >= 1, got "
                f"{self.integration_steps}, {self.candidates}"
            )
        if self.clip_feasible <= 1.0 or self.clip_infeasible <= 1.0:
            raise ValueError("weight clips must exceed 1")
        if self.batch < 1 or self.steps < 0:
            raise ValueError(f"bad batch/steps: {self.batch}, {self.steps}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


# ---------------------------------------------------------------------------
# path construction and guidance weights
# ---------------------------------------------------------------------------


def path_point(
    a_data: np.ndarray, eps: np.ndarray, t: np.ndarray | float
) -> tuple[np.ndarray, np.ndarray]:
    """Straight-line probability path: a_t = (1-t) eps + t a, u_t = a - eps."""
    a_data = np.asarray(a_data, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError(f"path time must lie in [0, 1], got {t}")
    while t_arr.ndim < a_data.ndim:
        t_arr = t_arr[..., None]
    return (1.0 - t_arr) * eps + t_arr * a_data, a_data - eps


def guidance_weight(
    adv: np.ndarray | float,
    alpha: float,
    feasible: np.ndarray | bool,
    clip_feasible: float = 100.0,
    clip_infeasible: float = 150.0,
) -> np.ndarray:
    """w = min(exp(alpha * adv), clip), computed in log space to avoid overflow."""
    adv = np.asarray(adv, dtype=np.float64)
    clip = np.where(feasible, clip_feasible, clip_infeasible)
    return np.exp(np.minimum(alpha * adv, np.log(clip)))


def tilted_distribution(probs: np.ndarray, adv: np.ndarray, alpha: float) -> np.ndarray:
    """Discrete exponential tilt p(a) exp(alpha adv(a)) / Z, in log space."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs <= 0.0):
        raise ValueError("behavior probabilities must be strictly positive")
    logits = np.log(probs) + alpha * np.asarray(adv, dtype=np.float64)
    logits -= logits.max()
    out = np.exp(logits)
    return out / out.sum()


# ---------------------------------------------------------------------------
# generic weighted flow-matching core
# ---------------------------------------------------------------------------


def fm_loss_and_grads(
    net: MLP, feat: np.ndarray, u_t: np.ndarray, weights: np.ndarray
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Weighted regression of the field onto path velocities.

    loss = mean_i w_i ||v(feat_i) - u_i||^2, with gradients for the
    network parameters only; weights are fixed inputs.
    """
    out, cache = net.forward_cached(feat)
    diff = out - u_t
    loss = float(np.mean(weights * np.sum(diff * diff, axis=1)))
    dout = (2.0 / feat.shape[0]) * weights[:, None] * diff
    grads, _ = net.backward(cache, dout)
    return loss, grads


def train_velocity_field(
    conds: np.ndarray,
    actions: np.ndarray,
    weights: np.ndarray,
    *,
    hidden: tuple[int, ...] = (256, 256),
    steps: int = 10_000,
    batch: int = 256,
    lr: float = 3e-4,
    seed: int = 0,
) -> MLP:
    """Minimise mean w * ||v(a_t, cond, t) - (a - eps)||^2 over random (t, eps).

    conds may have zero columns (unconditional field).  The network
    input layout is [a_t, cond, t].
    """
    actions = np.asarray(actions, dtype=np.float64)
    conds = np.asarray(conds, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if actions.ndim != 2 or conds.ndim != 2 or conds.shape[0] != actions.shape[0]:
        raise ValueError(
            f"actions {actions.shape} and conds {conds.shape} must share rows"
        )
    if weights.shape != (actions.shape[0],):
        raise ValueError(f"weights shape {weights.shape} != ({actions.shape[0]},)")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0.0):
        raise ValueError("weights must be finite and non-negative")
    d = actions.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4177]))
    net = MLP((d + conds.shape[1] + 1, *hidden, d), np.random.default_rng(np.random.SeedSequence([seed, 4178])))
    opt = Adam(lr=lr)
    n = actions.shape[0]
    for step in range(steps):
        idx = rng.integers(0, n, size=batch)
        a = actions[idx]
        w = weights[idx]
        t = rng.uniform(0.0, 1.0, size=batch)
        eps = rng.standard_normal((batch, d))
        a_t, u_t = path_point(a, eps, t)
        feat = np.concatenate([a_t, conds[idx], t[:, None]], axis=1)
        loss, grads = fm_loss_and_grads(net, feat, u_t, w)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite flow-matching loss at step {step}")
        opt.step(net, grads)
    return net


def integrate_field(net: MLP, base: np.ndarray, conds: np.ndarray, steps: int) -> np.ndarray:
    """Explicit Euler from t=0 to t=1 in `steps` uniform substeps."""
    a = np.asarray(base, dtype=np.float64).copy()
    conds = np.asarray(conds, dtype=np.float64)
    dt = 1.0 / steps
    m = a.shape[0]
    t_col = np.empty((m, 1))
    for k in range(steps):
        t_col[:] = k * dt
        feat = np.concatenate([a, conds, t_col], axis=1)
        a += dt * net.forward(feat)
    if not np.all(np.isfinite(a)):
        raise ValueError("flow integration produced non-finite actions")
    return a


def project_disc(actions: np.ndarray) -> np.ndarray:
    """Scale any action with norm > 1 back onto the unit circle."""
    actions = np.asarray(actions, dtype=np.float64)
    norms = np.sqrt(np.sum(actions * actions, axis=-1, keepdims=True))
    return actions / np.maximum(norms, 1.0)


# ---------------------------------------------------------------------------
# the boat policy proper
# ---------------------------------------------------------------------------


class AdvantageEvaluator:
    """Budget extraction and advantages against a frozen value bundle.

    z*(x) queries are cached by the state's byte pattern, so repeated
    dataset states during training pay for bisection once.
    """

    def __init__(self, bundle: ValueBundle, thr: ThresholdConfig | None = None):
        self.bundle = bundle
        self.thr = thr or ThresholdConfig(
            z_lo=bundle.z_min, z_hi=bundle.z_max, tol=bundle.feasibility_tol()
        )
        self._cache: dict[bytes, float] = {}

    def z_star_batch(self, states: np.ndarray) -> np.ndarray:
        states = np.ascontiguousarray(states, dtype=np.float64)
        out = np.empty(states.shape[0])
        missing: list[int] = []
        keys = []
        for i in range(states.shape[0]):
            key = states[i].tobytes()
            keys.append(key)
            hit = self._cache.get(key)
            if hit is None:
                missing.append(i)
            else:
                out[i] = hit
        if missing:
            sub = states[missing]
            vals, _ = z_star_batch(self.bundle.v_hat_eval, sub, self.thr)
            for j, i in enumerate(missing):
                self._cache[keys[i]] = float(vals[j])
                out[i] = vals[j]
        return out

    def advantage(self, states: np.ndarray, acts: np.ndarray, zs: np.ndarray) -> np.ndarray:
        return self.bundle.q_hat_min_eval(states, zs, acts) - self.bundle.v_hat_eval(states, zs)

    def candidate_scores(
        self,
        states: np.ndarray,
        zs: np.ndarray,
        acts: np.ndarray,
        env: EnvConfig | None = None,
    ) -> np.ndarray:
        """Per-action value at budget z, used to rank sampled candidates.

        With a known environment the score backs the fitted value up
        through the real one-step dynamics,

            gamma * V(x', clip((z - r(x)) / gamma, z_min, z_max)),

        which reads the action's effect off the value surface's state
        gradient; fit noise at two nearby states largely cancels.  The
        full one-step backup would take a min with ell(x), but that
        term is the same for every candidate and, whenever the current
        margin binds, flattens the ranking exactly where action choice
        matters most, so only the successor term ranks.  The budget is
        clipped to the bundle's trained range because the value net
        extrapolates unreliably outside it.  The learned Q heads carry
        the same information in principle but resolve per-step action
        differences (order dt) far less reliably, so they are only the
        fallback when the dynamics are not available.
        """
        if env is None:
            return self.bundle.q_hat_min_eval(states, zs, acts)
        nxt = step_many(states, acts, env)
        z_next = np.clip(
            (zs - reward_many(states, env)) / self.bundle.gamma,
            self.bundle.z_min,
            self.bundle.z_max,
        )
        return self.bundle.gamma * self.bundle.v_hat_eval(nxt, z_next)

    def feasible(self, states: np.ndarray) -> np.ndarray:
        return self.bundle.v_s_eval(states) >= -self.thr.tol


class FlowPolicy:
    """Trained velocity field plus the sampler settings it was built for."""

    def __init__(
        self,
        net: MLP,
        *,
        x_center: tuple[float, float],
        x_half: tuple[float, float],
        integration_steps: int = 5,
        candidates: int = 8,
        alpha: float = 50.0,
        clip_feasible: float = 100.0,
        clip_infeasible: float = 150.0,
        condition_on_z: bool = False,
        z_center: float = 0.0,
        z_half: float = 1.0,
        seed: int = 0,
    ):
        self.net = net
        self.x_center = np.asarray(x_center, dtype=np.float64)
        self.x_half = np.asarray(x_half, dtype=np.float64)
        self.integration_steps = int(integration_steps)
        self.candidates = int(candidates)
        self.alpha = float(alpha)
        self.clip_feasible = float(clip_feasible)
        self.clip_infeasible = float(clip_infeasible)
        self.condition_on_z = bool(condition_on_z)
        self.z_center = float(z_center)
        self.z_half = float(z_half)
        self.seed = int(seed)
        expected = 2 + self.x_center.size + (1 if condition_on_z else 0) + 1
        if net.in_dim != expected:
            raise ValueError(f"velocity net takes {net.in_dim} inputs, expected {expected}")

    def conds_for(self, states: np.ndarray, zs: np.ndarray | None) -> np.ndarray:
        feats = (np.asarray(states, dtype=np.float64) - self.x_center) / self.x_half
        if self.condition_on_z:
            if zs is None:
                raise ValueError("policy conditions on z but no budget was supplied")
            zn = (np.asarray(zs, dtype=np.float64) - self.z_center) / self.z_half
            feats = np.concatenate([feats, zn[:, None]], axis=1)
        return feats


def train_policy(ds: OfflineDataset, bundle: ValueBundle, cfg: PolicyTrainConfig) -> FlowPolicy:
    """Weighted flow matching on dataset actions with epigraph guidance.

    Budgets z*(x), advantages, feasibility flags, and weights are fixed
    functions of the frozen bundle, so they are computed once for the
    whole dataset (in chunks) before the regression loop.

    The advantage of a logged transition is its recorded one-step
    backup against the fitted value,

        gamma * V(x', clip((z* - r) / gamma, z_min, z_max)) - V(x, z*),

    rather than a learned Q read-out: the stored (r, x') pin the
    action's actual effect, so the tilt picks up the value surface's
    state gradient instead of the Q heads' much noisier per-action
    differences.  As in candidate ranking, the ell(x) term of the full
    backup is omitted (it is action-independent and masks the signal
    where the margin binds) and the successor budget is clipped to the
    bundle's trained range.
    """
    adv_eval = AdvantageEvaluator(
        bundle,
        ThresholdConfig(
            bundle.z_min,
            bundle.z_max,
            iterations=cfg.bisect_iterations,
            tol=bundle.feasibility_tol(),
        ),
    )
    n = len(ds)
    zs = np.empty(n)
    advs = np.empty(n)
    feas = np.empty(n, dtype=bool)
    chunk = 8192
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        xs = ds.xs[lo:hi]
        z_c, _ = z_star_batch(bundle.v_hat_eval, xs, adv_eval.thr)
        zs[lo:hi] = z_c
        z_next = np.clip(
            (z_c - ds.rewards[lo:hi]) / bundle.gamma, bundle.z_min, bundle.z_max
        )
        backed = bundle.gamma * bundle.v_hat_eval(ds.xs_next[lo:hi], z_next)
        advs[lo:hi] = backed - bundle.v_hat_eval(xs, z_c)
        feas[lo:hi] = adv_eval.feasible(xs)
    weights = guidance_weight(advs, cfg.alpha, feas, cfg.clip_feasible, cfg.clip_infeasible)

    env = ds.meta.env
    x_center = (
        0.5 * (env.x1_bounds[0] + env.x1_bounds[1]),
        0.5 * (env.x2_bounds[0] + env.x2_bounds[1]),
    )
    x_half = (
        0.5 * (env.x1_bounds[1] - env.x1_bounds[0]),
        0.5 * (env.x2_bounds[1] - env.x2_bounds[0]),
    )
    z_center = 0.5 * (bundle.z_min + bundle.z_max)
    z_half = max(0.5 * (bundle.z_max - bundle.z_min), 1e-9)

    conds = (ds.xs - np.asarray(x_center)) / np.asarray(x_half)
    if cfg.condition_on_z:
        conds = np.concatenate([conds, ((zs - z_center) / z_half)[:, None]], axis=1)

    net = train_velocity_field(
        conds,
        ds.acts,
        weights,
        hidden=cfg.hidden,
        steps=cfg.steps,
        batch=cfg.batch,
        lr=cfg.lr,
        seed=cfg.seed,
    )
    return FlowPolicy(
        net,
        x_center=x_center,
        x_half=x_half,
        integration_steps=cfg.integration_steps,
        candidates=cfg.candidates,
        alpha=cfg.alpha,
        clip_feasible=cfg.clip_feasible,
        clip_infeasible=cfg.clip_infeasible,
        condition_on_z=cfg.condition_on_z,
        z_center=z_center,
        z_half=z_half,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_action_batch(
    policy: FlowPolicy,
    adv_eval: AdvantageEvaluator,
    states: np.ndarray,
    rng: np.random.Generator,
    candidates: int | None = None,
    env: EnvConfig | None = None,
) -> np.ndarray:
    """One action per state: best of N integrated candidates at z*(x).

    Pass the environment to rank candidates through its one-step
    dynamics (see AdvantageEvaluator.candidate_scores); without it the
    learned Q heads do the ranking.
    """
    states = np.asarray(states, dtype=np.float64)
    m = states.shape[0]
    n_cand = policy.candidates if candidates is None else int(candidates)
    need_z = n_cand > 1 or policy.condition_on_z
    zs = adv_eval.z_star_batch(states) if need_z else None

    base = rng.standard_normal((m, n_cand, 2))
    conds = policy.conds_for(states, zs)
    conds_rep = np.repeat(conds, n_cand, axis=0)
    flat = integrate_field(policy.net, base.reshape(m * n_cand, 2), conds_rep, policy.integration_steps)
    flat = project_disc(flat)
    if n_cand == 1:
        return flat
    assert zs is not None
    states_rep = np.repeat(states, n_cand, axis=0)
    z_rep = np.repeat(zs, n_cand)
    scores = adv_eval.candidate_scores(states_rep, z_rep, flat, env).reshape(m, n_cand)
    pick = scores.argmax(axis=1)
    return flat.reshape(m, n_cand, 2)[np.arange(m), pick]


def sample_action(
    policy: FlowPolicy,
    adv_eval: AdvantageEvaluator,
    x: "np.ndarray | tuple[float, float]",
    rng: np.random.Generator,
    env: EnvConfig | None = None,
) -> np.ndarray:
    row = np.asarray(x, dtype=np.float64).reshape(1, 2)
    return sample_action_batch(policy, adv_eval, row, rng, env=env)[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_policy(policy: FlowPolicy, path: str) -> None:
    blob = net_to_bytes(policy.net, seed=policy.seed)
    manifest = {
        "x_center": policy.x_center.tolist(),
        "x_half": policy.x_half.tolist(),
        "integration_steps": policy.integration_steps,
        "candidates": policy.candidates,
        "alpha": policy.alpha,
        "clip_feasible": policy.clip_feasible,
        "clip_infeasible": policy.clip_infeasible,
        "condition_on_z": policy.condition_on_z,
        "z_center": policy.z_center,
        "z_half": policy.z_half,
        "seed": policy.seed,
    }
    head = (
        f"{POLICY_MAGIC} v{POLICY_VERSION}\n"
        f"manifest {json.dumps(manifest, sort_keys=True)}\n"
        f"net v {len(blob)}\n\n"
    )
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        fh.write(blob)


def load_policy(path: str) -> FlowPolicy:
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    lines = raw[:sep].decode("ascii").splitlines()
    magic, _, version = lines[0].partition(" ")
    if magic != POLICY_MAGIC:
        raise CheckpointError(f"{path}: bad magic {lines[0]!r}")
    if version != f"v{POLICY_VERSION}":
        raise CheckpointError(f"{path}: unsupported policy version {version!r}")
    if len(lines) != 3 or not lines[1].startswith("manifest ") or not lines[2].startswith("net v "):
        raise CheckpointError(f"{path}: malformed policy header")
    manifest = json.loads(lines[1][len("manifest ") :])
    size = int(lines[2].split()[2])
    blob = raw[sep + 2 : sep + 2 + size]
    if len(blob) != size or sep + 2 + size != len(raw):
        raise CheckpointError(f"{path}: policy blob truncated or padded")
    net, _ = net_from_bytes(blob, context=f"{path}:v")
    return FlowPolicy(
        net,
        x_center=tuple(manifest["x_center"]),
        x_half=tuple(manifest["x_half"]),
        integration_steps=manifest["integration_steps"],
        candidates=manifest["candidates"],
        alpha=manifest["alpha"],
        clip_feasible=manifest["clip_feasible"],
        clip_infeasible=manifest["clip_infeasible"],
        condition_on_z=manifest["condition_on_z"],
        z_center=manifest["z_center"],
        z_half=manifest["z_half"],
        seed=manifest["seed"],
    )
