"""Exact values for tiny deterministic MDPs with state constraints.

Two independent routes to the constrained value:

* brute_force_constrained_value: masked finite-horizon DP on the state
  set, after computing the maximal safe invariant set.
* value_iteration_epigraph + recover_value: fixed point of the budget
  recursion V(x, z) <- max_a min(ell(x), gamma * V(f(x, a), (z - r(x)) / gamma)),
  iterated exactly on piecewise-linear curves and sampled onto a uniform
  z grid, then the zero-level crossing in z.

Agreement between the two is the correctness anchor for the learned
version of the same recursion.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TabularMDP",
    "EpigraphGrid",
    "brute_force_constrained_value",
    "safe_invariant_set",
    "value_iteration_epigraph",
    "recover_value",
    "grid_bounds",
    "default_horizon",
    "chain12",
    "all_unsafe",
    "single_safe_loop",
    "two_state_cycle",
    "random_mdp",
    "FIXTURES",
    "load_mdp_config",
]


@dataclass(frozen=True)
class TabularMDP:
    """Finite deterministic MDP with per-state reward and safety margin."""

    next_state: np.ndarray  # (n_states, n_actions) int
    rewards: np.ndarray  # (n_states,)
    safety: np.ndarray  # (n_states,)
    gamma: float
    horizon: int | None = None
    names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        nxt = np.asarray(self.next_state, dtype=np.int64)
        r = np.asarray(self.rewards, dtype=np.float64)
        ell = np.asarray(self.safety, dtype=np.float64)
        if nxt.ndim != 2:
            raise ValueError(f"transition table must be 2-D, got shape {nxt.shape}")
        n = nxt.shape[0]
        if r.shape != (n,) or ell.shape != (n,):
            raise ValueError(
                f"reward/safety shapes {r.shape}/{ell.shape} do not match {n} states"
            )
        if nxt.size and (nxt.min() < 0 or nxt.max() >= n):
            raise ValueError("transition table must be total (all targets valid states)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        object.__setattr__(self, "next_state", nxt)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "safety", ell)

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]


@dataclass(frozen=True)
class EpigraphGrid:
    """Budget grid and the converged recursion table V[state][z index]."""

    z: np.ndarray  # (n_z,) ascending uniform
    table: np.ndarray  # (n_states, n_z)
    sweeps: int

    def __post_init__(self) -> None:
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim != 1 or z.size < 2 or np.any(np.diff(z) <= 0):
            raise ValueError("z grid must be 1-D, ascending, with at least 2 points")
        if not np.all(np.isfinite(self.table)):
            raise ValueError("grid table must be finite")

    @property
    def spacing(self) -> float:
        return float(self.z[1] - self.z[0])


# ---------------------------------------------------------------------------
# brute force on the state set
# ---------------------------------------------------------------------------


def safe_invariant_set(m: TabularMDP) -> np.ndarray:
    """Boolean mask of states from which safety can be maintained forever."""
    safe = np.asarray(m.safety) >= 0.0
    while True:
        reachable_safe = safe[m.next_state]  # (n_states, n_actions)
        keep = safe & reachable_safe.any(axis=1)
        if np.array_equal(keep, safe):
            return keep
        safe = keep


def default_horizon(m: TabularMDP, resolution: float) -> int:
    """Smallest H with gamma^H * max|r| / (1 - gamma) below resolution."""
    top = float(np.max(np.abs(m.rewards)))
    if top == 0.0:
        return 1
    h = math.log(resolution * (1.0 - m.gamma) / top) / math.log(m.gamma)
    return max(1, int(math.ceil(h)))


def brute_force_constrained_value(
    m: TabularMDP, horizon: int | None = None, resolution: float = 1e-9
) -> np.ndarray:
    """Constrained value per state; -inf where no safe continuation exists.

    Finite-horizon DP restricted to the safe invariant set.  The
    truncation error is bounded by gamma^H * max|r| / (1 - gamma); the
    default horizon pushes that below `resolution`.
    """
    if horizon is None:
        horizon = m.horizon if m.horizon is not None else default_horizon(m, resolution)
    invariant = safe_invariant_set(m)
    values = np.zeros(m.n_states)
    ok = invariant[m.next_state]  # action keeps us inside the invariant set
    for _ in range(horizon):
        cont = np.where(ok, values[m.next_state], -np.inf)
        values = m.rewards + m.gamma * cont.max(axis=1)
        values[~invariant] = 0.0  # placeholder; masked to -inf below
    values[~invariant] = -np.inf
    return values


# ---------------------------------------------------------------------------
# budget-grid value iteration
# ---------------------------------------------------------------------------


def grid_bounds(m: TabularMDP) -> tuple[float, float]:
    """Budget range covering every achievable return with unit margin.

    Per-state stay-forever returns r / (1 - gamma) bound all discounted
    returns from below and above, so [min - 1, max + 1] contains every
    value the recovery step can produce.
    """
    scale = 1.0 / (1.0 - m.gamma)
    return float(m.rewards.min() * scale - 1.0), float(m.rewards.max() * scale + 1.0)


# Every iterate of the budget recursion is non-increasing, 1-Lipschitz,
# and piecewise linear in z with slopes in [-1, 0]: the affine budget map
# gamma * f((z - r) / gamma) preserves slopes, and min and max keep them
# in that range.  A curve is stored as its breakpoints (xs, ys): constant
# at ys[0] left of xs[0], linear in between, slope -1 right of xs[-1].
# The right tail is the asymptotic of the return branch and doubles as
# the boundary condition that makes the fixed point unique; with a
# constant extension the all-zero table would be a spurious fixed point.
# Iterating on sampled tables instead of breakpoints biases the result:
# linear interpolation rounds the kink at the zero crossing downward and
# the bias compounds along long state chains, while the tight upper
# reconstruction inflates plateaus sitting just below zero and the
# inflation feeds back through the recursion on cycles.  Breakpoint
# curves make every update step exact.


def _curve_eval(xs: np.ndarray, ys: np.ndarray, zq: np.ndarray) -> np.ndarray:
    """Evaluate a breakpoint curve: plateau left, slope -1 right."""
    zq = np.asarray(zq, dtype=np.float64)
    k = np.searchsorted(xs, zq, side="right") - 1
    out = np.empty(zq.shape)
    left = k < 0
    right = k >= xs.size - 1
    out[left] = ys[0]
    out[right] = ys[-1] - (zq[right] - xs[-1])
    mid = ~(left | right)
    if np.any(mid):
        km = k[mid]
        t = (zq[mid] - xs[km]) / (xs[km + 1] - xs[km])
        out[mid] = ys[km] + t * (ys[km + 1] - ys[km])
    return out


def _curve_max(
    ax: np.ndarray, ay: np.ndarray, bx: np.ndarray, by: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise max of two curves, with crossing points inserted.

    Both curves are affine between consecutive points of the union grid,
    constant left of it, and slope -1 right of it, so the only crossings
    missing from the union are sign changes of the difference between
    neighbouring grid points; the parallel tails never cross.
    """
    grid = np.union1d(ax, bx)
    fa = _curve_eval(ax, ay, grid)
    fb = _curve_eval(bx, by, grid)
    vals = np.maximum(fa, fb)
    d = fa - fb
    crossing = d[:-1] * d[1:] < 0.0
    if np.any(crossing):
        i = np.nonzero(crossing)[0]
        t = d[i] / (d[i] - d[i + 1])
        grid = np.concatenate([grid, grid[i] + t * (grid[i + 1] - grid[i])])
        vals = np.concatenate([vals, fa[i] + t * (fa[i + 1] - fa[i])])
        order = np.argsort(grid, kind="stable")
        grid, vals = grid[order], vals[order]
    return grid, vals


def _curve_min_const(
    xs: np.ndarray, ys: np.ndarray, cap: float
) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise min of a curve with a constant."""
    tail_exit = xs[-1] + (ys[-1] - cap) if ys[-1] > cap else None
    clipped = np.minimum(ys, cap)
    above = ys > cap
    crossing = above[:-1] != above[1:]
    if np.any(crossing):
        i = np.nonzero(crossing)[0]
        t = (ys[i] - cap) / (ys[i] - ys[i + 1])
        xs = np.concatenate([xs, xs[i] + t * (xs[i + 1] - xs[i])])
        clipped = np.concatenate([clipped, np.full(i.size, cap)])
        order = np.argsort(xs, kind="stable")
        xs, clipped = xs[order], clipped[order]
    if tail_exit is not None:
        xs = np.append(xs, tail_exit)
        clipped = np.append(clipped, cap)
    return xs, clipped


def _curve_prune(
    xs: np.ndarray, ys: np.ndarray, eps: float = 5e-12
) -> tuple[np.ndarray, np.ndarray]:
    """Drop breakpoints the curve's extensions already reproduce.

    Virtual anchors one unit past each end encode the plateau and the
    slope -1 tail, so a single collinearity walk also removes redundant
    first and last points.  The anchors themselves always survive
    because their slopes differ, so at least one real point remains.
    """
    if xs.size > 1:
        keep = np.concatenate([[True], np.diff(xs) > 1e-12])
        xs, ys = xs[keep], ys[keep]
    ex = np.concatenate([[xs[0] - 1.0], xs, [xs[-1] + 1.0]])
    ey = np.concatenate([[ys[0]], ys, [ys[-1] - 1.0]])
    kept = [0]
    for j in range(1, ex.size):
        while len(kept) >= 2:
            i0, i1 = kept[-2], kept[-1]
            t = (ex[i1] - ex[i0]) / (ex[j] - ex[i0])
            if abs(ey[i1] - (ey[i0] + t * (ey[j] - ey[i0]))) > eps:
                break
            kept.pop()
        kept.append(j)
    idx = np.array(kept[1:-1], dtype=np.int64) - 1
    return xs[idx], ys[idx]


def _curve_gap(
    a: tuple[np.ndarray, np.ndarray], b: tuple[np.ndarray, np.ndarray]
) -> float:
    """Sup-norm distance between two curves.

    The difference is affine between union breakpoints, constant to the
    left, and constant to the right (parallel tails), so the supremum is
    attained on the union grid.
    """
    grid = np.union1d(a[0], b[0])
    return float(np.max(np.abs(_curve_eval(*a, grid) - _curve_eval(*b, grid))))


def value_iteration_epigraph(
    m: TabularMDP,
    n_z: int = 401,
    z_span: tuple[float, float] | None = None,
    tol: float = 1e-10,
    max_sweeps: int = 50_000,
) -> EpigraphGrid:
    """Iterate the budget recursion to its fixed point, sampled on a z grid.

    The iteration runs on exact piecewise-linear curves (see above) and
    stops once a sweep moves no curve by more than tol anywhere; the
    converged curves are then sampled onto the uniform grid.  The update
    is a gamma-contraction in sup norm, so convergence is geometric; a
    sweep cap guards against configuration mistakes.
    """
    if n_z < 2:
        raise ValueError(f"need at least 2 grid points, got {n_z}")
    lo, hi = z_span if z_span is not None else grid_bounds(m)
    if not lo < hi:
        raise ValueError(f"empty z span [{lo}, {hi}]")
    z = np.linspace(lo, hi, n_z)
    curves = [(np.array([hi]), np.array([0.0]))] * m.n_states
    change = np.inf
    for sweep in range(1, max_sweeps + 1):
        new = []
        change = 0.0
        for s in range(m.n_states):
            best: tuple[np.ndarray, np.ndarray] | None = None
            for a in range(m.n_actions):
                cx, cy = curves[m.next_state[s, a]]
                shifted = (m.gamma * cx + m.rewards[s], m.gamma * cy)
                best = shifted if best is None else _curve_max(*best, *shifted)
            nx, ny = _curve_min_const(*best, float(m.safety[s]))
            nx, ny = _curve_prune(nx, ny)
            new.append((nx, ny))
            change = max(change, _curve_gap(curves[s], (nx, ny)))
        curves = new
        if change < tol:
            table = np.vstack([_curve_eval(cx, cy, z) for cx, cy in curves])
            return EpigraphGrid(z=z, table=table, sweeps=sweep)
    raise RuntimeError(
        f"budget value iteration did not reach {tol} in {max_sweeps} sweeps "
        f"(last change {change})"
    )


def recover_value(grid: EpigraphGrid) -> tuple[np.ndarray, np.ndarray]:
    """Zero-level crossing of the table along z, per state.

    Returns (values, saturated).  A state whose entire row is negative
    gets -inf (infeasible).  A row non-negative at the top edge returns
    z_hi with the saturated flag set, meaning the grid did not reach the
    crossing.  Otherwise the curve between the bracketing samples is
    non-increasing and 1-Lipschitz, which pins its zero to the interval
    [z_k + y_k, z_{k+1} + y_{k+1}]; the midpoint is reported.  When the
    curve drops through zero with unit slope, as the fixed point does at
    a plain crossing, the interval collapses and the midpoint is exact.
    """
    z = grid.z
    spacing = grid.spacing
    n_states = grid.table.shape[0]
    values = np.empty(n_states)
    saturated = np.zeros(n_states, dtype=bool)
    for s in range(n_states):
        row = grid.table[s]
        nonneg = row >= 0.0
        if not nonneg[0]:
            values[s] = -np.inf
            continue
        if nonneg[-1]:
            values[s] = z[-1]
            saturated[s] = True
            continue
        k = int(np.nonzero(nonneg)[0][-1])
        earliest = z[k] + min(float(row[k]), spacing)
        latest = z[k + 1] + max(float(row[k + 1]), -spacing)
        values[s] = 0.5 * (earliest + max(latest, earliest))
    return values, saturated


# ---------------------------------------------------------------------------
# bundled test MDPs
# ---------------------------------------------------------------------------


def chain12(gamma: float = 0.99) -> TabularMDP:
    """12-state chain with a risky high-reward shortcut and two traps.

    The alternative action at s2 jumps into an unsafe absorber, and at
    s3 it cuts through an unsafe state toward the best reward in the
    MDP, so the constrained optimum must ignore both temptations.
    """
    n = 12
    nxt = np.empty((n, 2), dtype=np.int64)
    for s in range(n):
        nxt[s] = (min(s + 1, 8), min(s + 1, 8))
    nxt[2] = (3, 11)
    nxt[3] = (4, 9)
    nxt[8] = (8, 8)
    nxt[9] = (10, 10)
    nxt[10] = (10, 10)
    nxt[11] = (11, 11)
    rewards = np.array([0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.6, 0.8, 1.5, 2.0, 0.0])
    safety = np.array([0.5, 1.0, 0.9, 0.3, 0.7, 0.6, 0.8, 0.25, 1.2, -0.5, 0.4, -1.0])
    names = tuple(f"s{i}" for i in range(n))
    return TabularMDP(nxt, rewards, safety, gamma, names=names)


def all_unsafe(gamma: float = 0.99) -> TabularMDP:
    """Every state violates the constraint; all values are -inf."""
    nxt = np.array([[1, 2], [2, 0], [0, 1]], dtype=np.int64)
    rewards = np.array([1.0, 0.5, 2.0])
    safety = np.array([-0.1, -1.0, -0.3])
    return TabularMDP(nxt, rewards, safety, gamma)


def single_safe_loop(reward: float = 1.0, ell: float = 1.0, gamma: float = 0.99) -> TabularMDP:
    nxt = np.zeros((1, 1), dtype=np.int64)
    return TabularMDP(nxt, np.array([reward]), np.array([ell]), gamma)


def two_state_cycle(gamma: float = 0.99) -> TabularMDP:
    """Negative rewards everywhere (boat-like) with one escape choice."""
    nxt = np.array([[1, 0], [0, 1]], dtype=np.int64)
    rewards = np.array([-0.3, -0.1])
    safety = np.array([0.2, 0.6])
    return TabularMDP(nxt, rewards, safety, gamma)


def random_mdp(
    seed: int, n_states: int = 6, n_actions: int = 3, gamma: float = 0.9
) -> TabularMDP:
    rng = np.random.default_rng(seed)
    nxt = rng.integers(0, n_states, size=(n_states, n_actions))
    rewards = rng.uniform(-1.0, 1.0, size=n_states)
    safety = rng.uniform(-0.5, 1.0, size=n_states)
    return TabularMDP(nxt, rewards, safety, gamma)


FIXTURES = {
    "chain12": chain12,
    "all-unsafe": all_unsafe,
    "single-safe-loop": single_safe_loop,
    "two-state-cycle": two_state_cycle,
}


# ---------------------------------------------------------------------------
# config-file MDPs
# ---------------------------------------------------------------------------


def load_mdp_config(path: str) -> TabularMDP:
    """Read an MDP from an INI file with [mdp], [reward], [safety], [edges].

    [mdp] lists `states` and `actions` as space-separated names plus
    `gamma` (and optional `horizon`).  [edges] maps `state.action` to a
    target state name and must be total; [reward] and [safety] must
    cover every state.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep state/action names case-sensitive
    read = parser.read(path)
    if not read:
        raise ValueError(f"cannot read MDP config {path!r}")
    for section in ("mdp", "reward", "safety", "edges"):
        if not parser.has_section(section):
            raise ValueError(f"{path}: missing [{section}] section")
    states = parser.get("mdp", "states", fallback="").split()
    actions = parser.get("mdp", "actions", fallback="").split()
    if not states or not actions:
        raise ValueError(f"{path}: [mdp] must list states and actions")
    if len(set(states)) != len(states):
        raise ValueError(f"{path}: duplicate state names")
    gamma = parser.getfloat("mdp", "gamma", fallback=0.99)
    horizon = parser.getint("mdp", "horizon", fallback=0) or None
    index = {name: i for i, name in enumerate(states)}

    def column(section: str) -> np.ndarray:
        missing = [s for s in states if not parser.has_option(section, s)]
        if missing:
            raise ValueError(f"{path}: [{section}] missing states {missing}")
        return np.array([parser.getfloat(section, s) for s in states])

    rewards = column("reward")
    safety = column("safety")
    nxt = np.empty((len(states), len(actions)), dtype=np.int64)
    missing_edges = []
    for s in states:
        for a in actions:
            key = f"{s}.{a}"
            if not parser.has_option("edges", key):
                missing_edges.append(key)
                continue
            target = parser.get("edges", key)
            if target not in index:
                raise ValueError(f"{path}: edge {key} targets unknown state {target!r}")
            nxt[index[s], actions.index(a)] = index[target]
    if missing_edges:
        raise ValueError(f"{path}: [edges] missing {missing_edges}")
    return TabularMDP(nxt, rewards, safety, gamma, horizon=horizon, names=tuple(states))
