"""The six value functions over the budget-augmented state, and their training.

The bundle holds an auxiliary pair over (x, z) -- a double-headed
Q(x, z, a) and its distilled V(x, z) -- plus reward and safety
envelopes over x alone.  Targets follow the budget recursion
y = min(ell(x), gamma * V(x', z')), envelopes use the analogous
one-step targets, and a one-sided penalty keeps V(x, z) under the
envelope bound min(V_r(x) - z, V_s(x)).

All target evaluations are semi-gradient: the networks inside a target
are evaluated without gradient flow, and distillation targets use the
EMA shadow copies with the elementwise two-head minimum.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import Batch, OfflineDataset, sample_batch
from .nets import (
    MLP,
    Adam,
    CheckpointError,
    TargetCopy,
    expectile_loss,
    net_from_bytes,
    net_to_bytes,
)

BUNDLE_MAGIC = "epiflow-bundle"
BUNDLE_VERSION = 1

ONLINE_NETS = ("q_hat_a", "q_hat_b", "v_hat", "q_r_a", "q_r_b", "v_r", "q_s_a", "q_s_b", "v_s")
TARGET_NETS = ("q_hat_ta", "q_hat_tb", "q_r_ta", "q_r_tb", "q_s_ta", "q_s_tb")

Grads = dict[str, list[tuple[np.ndarray, np.ndarray]]]


class TrainingDiverged(RuntimeError):
    """Raised when a value loss goes non-finite or V blows past the guard."""


@dataclass(frozen=True)
class ValueTrainConfig:
    tau: float = 0.9
    lam: float = 0.25
    gamma: float = 0.99
    batch: int = 256
    steps: int = 100_000
    seed: int = 0
    lr: float = 3e-4
    rho: float = 0.005
    hidden: tuple[int, ...] = (256, 256)

    def __post_init__(self) -> None:
        # tau = 0.5 (the symmetric point) is allowed because the expectile
        # sweep includes it; above 0.5 the loss is optimistic as intended.
        if not 0.5 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0.5, 1), got {self.tau}")
        if self.lam < 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.batch < 1 or self.steps < 0:
            raise ValueError(f"bad batch/steps: {self.batch}, {self.steps}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


class ValueBundle:
    """Nine online networks, six EMA shadows, and fixed input/output scaling.

    Input features are affinely mapped to O(1) ranges (box geometry for
    x, the budget interval for z) and raw-unit outputs are produced by a
    fixed scalar on each network's head; both transforms are constants
    chosen at construction, recorded in checkpoints, and invisible to
    callers, who always pass and receive raw units.
    """

    def __init__(
        self,
        z_min: float,
        z_max: float,
        gamma: float,
        *,
        hidden: tuple[int, ...] = (256, 256),
        seed: int = 0,
        x_center: tuple[float, float] = (-0.5, 0.0),
        x_half: tuple[float, float] = (2.5, 2.0),
        safety_scale: float = 1.0,
    ):
        if not z_min <= z_max:
            raise ValueError(f"z_min {z_min} exceeds z_max {z_max}")
        self.z_min = float(z_min)
        self.z_max = float(z_max)
        self.gamma = float(gamma)
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = int(seed)
        self.x_center = np.asarray(x_center, dtype=np.float64)
        self.x_half = np.asarray(x_half, dtype=np.float64)
        if np.any(self.x_half <= 0):
            raise ValueError(f"x_half must be positive, got {x_half}")
        self.z_center = 0.5 * (self.z_min + self.z_max)
        self.z_half = max(0.5 * (self.z_max - self.z_min), 1e-9)
        self.value_scale = max(1.0, abs(self.z_min), abs(self.z_max))
        self.safety_scale = max(1.0, float(safety_scale))

        def build(idx: int, in_dim: int) -> MLP:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, idx]))
            return MLP((in_dim, *self.hidden, 1), rng)

        self.q_hat_a = build(0, 5)
        self.q_hat_b = build(1, 5)
        self.v_hat = build(2, 3)
        self.q_r_a = build(3, 4)
        self.q_r_b = build(4, 4)
        self.v_r = build(5, 2)
        self.q_s_a = build(6, 4)
        self.q_s_b = build(7, 4)
        self.v_s = build(8, 2)
        self.q_hat_ta = TargetCopy(self.q_hat_a)
        self.q_hat_tb = TargetCopy(self.q_hat_b)
        self.q_r_ta = TargetCopy(self.q_r_a)
        self.q_r_tb = TargetCopy(self.q_r_b)
        self.q_s_ta = TargetCopy(self.q_s_a)
        self.q_s_tb = TargetCopy(self.q_s_b)
        self.history: list[dict[str, float]] = []

    # feature builders -------------------------------------------------------

    def _nx(self, xs: np.ndarray) -> np.ndarray:
        return (np.asarray(xs, dtype=np.float64) - self.x_center) / self.x_half

    def _nz(self, zs: np.ndarray) -> np.ndarray:
        return (np.asarray(zs, dtype=np.float64) - self.z_center) / self.z_half

    def f_x(self, xs: np.ndarray) -> np.ndarray:
        return self._nx(xs)

    def f_xa(self, xs: np.ndarray, acts: np.ndarray) -> np.ndarray:
        return np.concatenate([self._nx(xs), np.asarray(acts, dtype=np.float64)], axis=1)

    def f_xz(self, xs: np.ndarray, zs: np.ndarray) -> np.ndarray:
        return np.concatenate([self._nx(xs), self._nz(zs)[:, None]], axis=1)

    def f_xza(self, xs: np.ndarray, zs: np.ndarray, acts: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [self._nx(xs), self._nz(zs)[:, None], np.asarray(acts, dtype=np.float64)], axis=1
        )

    # raw-unit evaluation (no gradients) --------------------------------------

    def v_hat_eval(self, xs: np.ndarray, zs: np.ndarray) -> np.ndarray:
        return self.v_hat.forward(self.f_xz(xs, zs))[:, 0] * self.value_scale

    def q_hat_min_eval(self, xs: np.ndarray, zs: np.ndarray, acts: np.ndarray) -> np.ndarray:
        feat = self.f_xza(xs, zs, acts)
        return (
            np.minimum(self.q_hat_a.forward(feat)[:, 0], self.q_hat_b.forward(feat)[:, 0])
            * self.value_scale
        )

    def q_hat_target_min(self, xs: np.ndarray, zs: np.ndarray, acts: np.ndarray) -> np.ndarray:
        feat = self.f_xza(xs, zs, acts)
        return (
            np.minimum(self.q_hat_ta.forward(feat)[:, 0], self.q_hat_tb.forward(feat)[:, 0])
            * self.value_scale
        )

    def v_r_eval(self, xs: np.ndarray) -> np.ndarray:
        return self.v_r.forward(self.f_x(xs))[:, 0] * self.value_scale

    def v_s_eval(self, xs: np.ndarray) -> np.ndarray:
        return self.v_s.forward(self.f_x(xs))[:, 0] * self.safety_scale

    def feasibility_tol(self) -> float:
        """Margin for reading feasibility off the fitted envelope.

        The exact envelope equals zero on every feasible (x, z), so any
        fit hovers around zero there and a strict sign test amplifies
        regression noise into feasibility flips.  Downstream consumers
        treat values above -tol as feasible.  2% of the safety scale
        sits above the fit noise on clearly feasible states while
        keeping the feasibility test strict near the boundary, where a
        looser margin delays the switch to the maximally safe budget
        and measurably raises collision rates in closed loop.
        """
        return 0.02 * self.safety_scale

    def q_r_target_min(self, xs: np.ndarray, acts: np.ndarray) -> np.ndarray:
        feat = self.f_xa(xs, acts)
        return (
            np.minimum(self.q_r_ta.forward(feat)[:, 0], self.q_r_tb.forward(feat)[:, 0])
            * self.value_scale
        )

    def q_s_target_min(self, xs: np.ndarray, acts: np.ndarray) -> np.ndarray:
        feat = self.f_xa(xs, acts)
        return (
            np.minimum(self.q_s_ta.forward(feat)[:, 0], self.q_s_tb.forward(feat)[:, 0])
            * self.safety_scale
        )

    def ema_update(self, rho: float) -> None:
        self.q_hat_ta.update(self.q_hat_a, rho)
        self.q_hat_tb.update(self.q_hat_b, rho)
        self.q_r_ta.update(self.q_r_a, rho)
        self.q_r_tb.update(self.q_r_b, rho)
        self.q_s_ta.update(self.q_s_a, rho)
        self.q_s_tb.update(self.q_s_b, rho)

    @classmethod
    def from_dataset(cls, ds: OfflineDataset, cfg: ValueTrainConfig) -> "ValueBundle":
        env = ds.meta.env
        x_center = (
            0.5 * (env.x1_bounds[0] + env.x1_bounds[1]),
            0.5 * (env.x2_bounds[0] + env.x2_bounds[1]),
        )
        x_half = (
            0.5 * (env.x1_bounds[1] - env.x1_bounds[0]),
            0.5 * (env.x2_bounds[1] - env.x2_bounds[0]),
        )
        return cls(
            ds.z_min,
            ds.z_max,
            cfg.gamma,
            hidden=cfg.hidden,
            seed=cfg.seed,
            x_center=x_center,
            x_half=x_half,
            safety_scale=float(np.max(np.abs(ds.ells))),
        )


# ---------------------------------------------------------------------------
# losses (each returns a scalar and per-network parameter gradients)
# ---------------------------------------------------------------------------


def q_hat_target(ell_x: np.ndarray, v_hat_next: np.ndarray, gamma: float) -> np.ndarray:
    """Budget-recursion target y = min(ell(x), gamma * V(x', z'))."""
    return np.minimum(ell_x, gamma * v_hat_next)


def _head_mse(
    bundle: ValueBundle, names: tuple[str, str], feat: np.ndarray, y: np.ndarray, scale: float
) -> tuple[float, Grads]:
    total = 0.0
    grads: Grads = {}
    for name in names:
        net: MLP = getattr(bundle, name)
        out, cache = net.forward_cached(feat)
        diff = out[:, 0] * scale - y
        total += float(np.mean(diff * diff))
        dout = (2.0 * scale / diff.size) * diff
        grads[name], _ = net.backward(cache, dout[:, None])
    return total, grads


def loss_q_hat(bundle: ValueBundle, batch: Batch) -> tuple[float, Grads]:
    """Both auxiliary Q heads regressed on y = min(ell, gamma * V(x', z'))."""
    v_next = bundle.v_hat_eval(batch.xs_next, batch.z_next)  # online, no grad
    y = q_hat_target(batch.ells, v_next, bundle.gamma)
    feat = bundle.f_xza(batch.xs, batch.z, batch.acts)
    return _head_mse(bundle, ("q_hat_a", "q_hat_b"), feat, y, bundle.value_scale)


def _distill(
    bundle: ValueBundle, name: str, feat: np.ndarray, target: np.ndarray, tau: float, scale: float
) -> tuple[float, Grads]:
    net: MLP = getattr(bundle, name)
    out, cache = net.forward_cached(feat)
    diff = target - out[:, 0] * scale
    val, dval = expectile_loss(diff, tau)
    dout = (-scale / diff.size) * dval
    grads, _ = net.backward(cache, dout[:, None])
    return float(np.mean(val)), {name: grads}


def loss_v_hat(bundle: ValueBundle, batch: Batch, tau: float) -> tuple[float, Grads]:
    """Expectile distillation of the two-head target-copy minimum into V."""
    q = bundle.q_hat_target_min(batch.xs, batch.z, batch.acts)
    feat = bundle.f_xz(batch.xs, batch.z)
    return _distill(bundle, "v_hat", feat, q, tau, bundle.value_scale)


def loss_reward_envelope(bundle: ValueBundle, batch: Batch, tau: float) -> tuple[float, Grads]:
    """Q_r regression on r + gamma * V_r(x') plus V_r expectile distillation."""
    y = batch.rs + bundle.gamma * bundle.v_r_eval(batch.xs_next)  # no grad
    feat_q = bundle.f_xa(batch.xs, batch.acts)
    loss_q, grads = _head_mse(bundle, ("q_r_a", "q_r_b"), feat_q, y, bundle.value_scale)
    target = bundle.q_r_target_min(batch.xs, batch.acts)
    loss_v, g_v = _distill(bundle, "v_r", bundle.f_x(batch.xs), target, tau, bundle.value_scale)
    grads.update(g_v)
    return loss_q + loss_v, grads


def loss_safety_envelope(bundle: ValueBundle, batch: Batch, tau: float) -> tuple[float, Grads]:
    """Q_s regression on min(ell, gamma * V_s(x')) plus V_s distillation."""
    y = np.minimum(batch.ells, bundle.gamma * bundle.v_s_eval(batch.xs_next))  # no grad
    feat_q = bundle.f_xa(batch.xs, batch.acts)
    loss_q, grads = _head_mse(bundle, ("q_s_a", "q_s_b"), feat_q, y, bundle.safety_scale)
    target = bundle.q_s_target_min(batch.xs, batch.acts)
    loss_v, g_v = _distill(bundle, "v_s", bundle.f_x(batch.xs), target, tau, bundle.safety_scale)
    grads.update(g_v)
    return loss_q + loss_v, grads


def loss_regularizer(bundle: ValueBundle, batch: Batch) -> tuple[float, Grads]:
    """One-sided penalty max(0, V(x,z) - min(V_r(x) - z, V_s(x))).

    Only V receives gradients; the envelope bound is a constant here.
    """
    bound = np.minimum(bundle.v_r_eval(batch.xs) - batch.z, bundle.v_s_eval(batch.xs))
    feat = bundle.f_xz(batch.xs, batch.z)
    out, cache = bundle.v_hat.forward_cached(feat)
    viol = out[:, 0] * bundle.value_scale - bound
    active = viol > 0.0
    loss = float(np.mean(np.where(active, viol, 0.0)))
    dout = (bundle.value_scale / viol.size) * active.astype(np.float64)
    grads, _ = bundle.v_hat.backward(cache, dout[:, None])
    return loss, {"v_hat": grads}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _scaled_sum(
    a: list[tuple[np.ndarray, np.ndarray]],
    b: list[tuple[np.ndarray, np.ndarray]],
    s: float,
) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(aw + s * bw, ab + s * bb) for (aw, ab), (bw, bb) in zip(a, b)]


def train(ds: OfflineDataset, cfg: ValueTrainConfig) -> ValueBundle:
    """Interleaved updates: Q-hat, reward envelope, safety envelope, then V-hat.

    One Adam step per network per iteration, EMA shadows refreshed at the
    end of each iteration.  Aborts with diagnostics if any loss goes
    non-finite or |V| exceeds ten times the budget magnitude.
    """
    if abs(ds.meta.env.gamma - cfg.gamma) > 1e-12:
        raise ValueError(
            f"dataset gamma {ds.meta.env.gamma} differs from config gamma {cfg.gamma}"
        )
    bundle = ValueBundle.from_dataset(ds, cfg)
    opts = {name: Adam(lr=cfg.lr) for name in ONLINE_NETS}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 9001]))
    guard = 10.0 * max(abs(ds.z_min), abs(ds.z_max))

    for step in range(cfg.steps):
        batch = sample_batch(ds, cfg.batch, rng)

        l_q, g = loss_q_hat(bundle, batch)
        opts["q_hat_a"].step(bundle.q_hat_a, g["q_hat_a"])
        opts["q_hat_b"].step(bundle.q_hat_b, g["q_hat_b"])

        l_r, g = loss_reward_envelope(bundle, batch, cfg.tau)
        opts["q_r_a"].step(bundle.q_r_a, g["q_r_a"])
        opts["q_r_b"].step(bundle.q_r_b, g["q_r_b"])
        opts["v_r"].step(bundle.v_r, g["v_r"])

        l_s, g = loss_safety_envelope(bundle, batch, cfg.tau)
        opts["q_s_a"].step(bundle.q_s_a, g["q_s_a"])
        opts["q_s_b"].step(bundle.q_s_b, g["q_s_b"])
        opts["v_s"].step(bundle.v_s, g["v_s"])

        l_v, g_v = loss_v_hat(bundle, batch, cfg.tau)
        l_reg, g_reg = loss_regularizer(bundle, batch)
        combined = _scaled_sum(g_v["v_hat"], g_reg["v_hat"], cfg.lam)
        opts["v_hat"].step(bundle.v_hat, combined)

        bundle.ema_update(cfg.rho)

        total = l_q + l_r + l_s + l_v + cfg.lam * l_reg
        if not math.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: "
                f"q_hat={l_q} envelopes=({l_r}, {l_s}) v_hat={l_v} reg={l_reg}"
            )
        if step % 250 == 0 or step == cfg.steps - 1:
            v_now = bundle.v_hat_eval(batch.xs, batch.z)
            worst = float(np.max(np.abs(v_now)))
            if worst > guard:
                raise TrainingDiverged(
                    f"|V| reached {worst:.3g} at step {step}, guard {guard:.3g}"
                )
            bundle.history.append(
                {
                    "step": float(step),
                    "loss_q_hat": l_q,
                    "loss_reward": l_r,
                    "loss_safety": l_s,
                    "loss_v_hat": l_v,
                    "loss_reg": l_reg,
                }
            )
    return bundle


# ---------------------------------------------------------------------------
# bundle checkpoints: manifest line + concatenated per-net checkpoints
# ---------------------------------------------------------------------------


def save_bundle(bundle: ValueBundle, path: str, cfg: ValueTrainConfig | None = None) -> None:
    blobs: list[tuple[str, bytes]] = []
    for name in ONLINE_NETS:
        blobs.append((name, net_to_bytes(getattr(bundle, name), seed=bundle.seed)))
    for name in TARGET_NETS:
        blobs.append((name, net_to_bytes(getattr(bundle, name).net, seed=bundle.seed)))
    manifest = {
        "z_min": bundle.z_min,
        "z_max": bundle.z_max,
        "gamma": bundle.gamma,
        "hidden": list(bundle.hidden),
        "seed": bundle.seed,
        "x_center": bundle.x_center.tolist(),
        "x_half": bundle.x_half.tolist(),
        "safety_scale": bundle.safety_scale,
        "config": asdict(cfg) if cfg is not None else None,
    }
    head = [f"{BUNDLE_MAGIC} v{BUNDLE_VERSION}", "manifest " + json.dumps(manifest, sort_keys=True)]
    head += [f"net {name} {len(blob)}" for name, blob in blobs]
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n\n").encode("ascii"))
        for _, blob in blobs:
            fh.write(blob)


def load_bundle(path: str) -> tuple[ValueBundle, ValueTrainConfig | None]:
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    lines = raw[:sep].decode("ascii").splitlines()
    magic, _, version = lines[0].partition(" ")
    if magic != BUNDLE_MAGIC:
        raise CheckpointError(f"{path}: bad magic {lines[0]!r}")
    if version != f"v{BUNDLE_VERSION}":
        raise CheckpointError(f"{path}: unsupported bundle version {version!r}")
    if len(lines) < 2 or not lines[1].startswith("manifest "):
        raise CheckpointError(f"{path}: missing manifest line")
    manifest = json.loads(lines[1][len("manifest ") :])
    entries: list[tuple[str, int]] = []
    for line in lines[2:]:
        parts = line.split()
        if len(parts) != 3 or parts[0] != "net":
            raise CheckpointError(f"{path}: bad net line {line!r}")
        entries.append((parts[1], int(parts[2])))
    expected = list(ONLINE_NETS) + list(TARGET_NETS)
    if [name for name, _ in entries] != expected:
        raise CheckpointError(f"{path}: unexpected net list {[n for n, _ in entries]}")

    cfg = None
    if manifest.get("config") is not None:
        raw_cfg = dict(manifest["config"])
        raw_cfg["hidden"] = tuple(raw_cfg["hidden"])
        cfg = ValueTrainConfig(**raw_cfg)
    bundle = ValueBundle(
        manifest["z_min"],
        manifest["z_max"],
        manifest["gamma"],
        hidden=tuple(manifest["hidden"]),
        seed=manifest["seed"],
        x_center=tuple(manifest["x_center"]),
        x_half=tuple(manifest["x_half"]),
        safety_scale=manifest["safety_scale"],
    )
    offset = sep + 2
    for name, size in entries:
        net, _ = net_from_bytes(raw[offset : offset + size], context=f"{path}:{name}")
        offset += size
        if name in ONLINE_NETS:
            target: MLP = getattr(bundle, name)
        else:
            target = getattr(bundle, name).net
        if net.sizes != target.sizes:
            raise CheckpointError(
                f"{path}:{name}: sizes {net.sizes} do not match bundle {target.sizes}"
            )
        target.weights = net.weights
        target.biases = net.biases
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return bundle, cfg
