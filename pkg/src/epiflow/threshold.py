"""Per-state performance budget z*(x): the zero crossing of V(x, .) in z.

The evaluator convention is batched: vhat(states, z) takes an (n, d)
state array and an (n,) budget array and returns (n,) values.  The
crossing is located by a 64-point sign scan (which doubles as the
non-monotonicity diagnostic) followed by bisection inside the
largest-z crossing cell.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]

SCAN_POINTS = 64


class ThresholdStatus(enum.IntEnum):
    CONVERGED = 0
    INFEASIBLE = 1  # V < 0 already at z_lo
    SATURATED = 2  # V >= 0 still at z_hi; interval too small


@dataclass(frozen=True)
class ThresholdConfig:
    """Search interval and stopping rule for the budget bisection.

    ``tol`` relaxes the feasibility test from V >= 0 to V >= -tol.  The
    exact envelope value is 0 on the whole feasible set (the safe branch
    is a discounted minimum whose fixed point sits at zero), so a strict
    sign test on a fitted model classifies its own regression noise.  A
    small margin keeps the crossing detection anchored to the actual
    descent instead.
    """

    z_lo: float
    z_hi: float
    iterations: int = 32
    tol: float = 0.0

    def __post_init__(self) -> None:
        if not self.z_lo < self.z_hi:
            raise ValueError(f"need z_lo < z_hi, got [{self.z_lo}, {self.z_hi}]")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not self.tol >= 0.0:
            raise ValueError(f"tol must be >= 0, got {self.tol}")


def _eval(vhat: Evaluator, states: np.ndarray, z: np.ndarray) -> np.ndarray:
    out = np.asarray(vhat(states, z), dtype=np.float64)
    if out.shape != z.shape:
        raise ValueError(f"evaluator returned shape {out.shape}, expected {z.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError("evaluator produced non-finite values")
    return out


def z_star_batch(
    vhat: Evaluator, states: np.ndarray, cfg: ThresholdConfig
) -> tuple[np.ndarray, list[ThresholdStatus]]:
    """Vectorised budget extraction for a batch of states."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2:
        raise ValueError(f"states must be (n, d), got shape {states.shape}")
    n = states.shape[0]
    if n == 0:
        return np.empty(0), []

    lo = np.full(n, cfg.z_lo)
    hi = np.full(n, cfg.z_hi)
    v_lo = _eval(vhat, states, lo)
    v_hi = _eval(vhat, states, hi)
    floor = -cfg.tol
    infeasible = v_lo < floor
    saturated = ~infeasible & (v_hi >= floor)
    active = ~infeasible & ~saturated

    out = np.where(infeasible, cfg.z_lo, cfg.z_hi)
    statuses = np.where(
        infeasible, int(ThresholdStatus.INFEASIBLE), int(ThresholdStatus.SATURATED)
    )

    if np.any(active):
        sub = states[active]
        m = sub.shape[0]
        zs = np.linspace(cfg.z_lo, cfg.z_hi, SCAN_POINTS)
        tiled_states = np.repeat(sub, SCAN_POINTS, axis=0)
        tiled_z = np.tile(zs, m)
        grid = _eval(vhat, tiled_states, tiled_z).reshape(m, SCAN_POINTS)
        nonneg = grid >= floor
        flips = np.count_nonzero(nonneg[:, :-1] != nonneg[:, 1:], axis=1)
        wobbly = int(np.count_nonzero(flips > 1))
        if wobbly:
            logger.debug(
                "value not monotone in z for %d of %d states (multiple sign changes)",
                wobbly,
                m,
            )
        # bracket on the largest-z feasible->infeasible transition, which is
        # the scan's best stand-in for sup{z : V >= 0}
        down = nonneg[:, :-1] & ~nonneg[:, 1:]
        k = (SCAN_POINTS - 2) - np.argmax(down[:, ::-1], axis=1)
        b_lo = zs[k]
        b_hi = zs[k + 1]
        for _ in range(cfg.iterations):
            mid = 0.5 * (b_lo + b_hi)
            good = _eval(vhat, sub, mid) >= floor
            b_lo = np.where(good, mid, b_lo)
            b_hi = np.where(good, b_hi, mid)
        out[active] = np.clip(0.5 * (b_lo + b_hi), cfg.z_lo, cfg.z_hi)
        statuses[active] = int(ThresholdStatus.CONVERGED)

    return out, [ThresholdStatus(int(s)) for s in statuses]


def z_star(
    vhat: Evaluator, x: Sequence[float] | np.ndarray, cfg: ThresholdConfig
) -> tuple[float, ThresholdStatus]:
    """Single-state convenience wrapper around z_star_batch."""
    row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    values, statuses = z_star_batch(vhat, row, cfg)
    return float(values[0]), statuses[0]
