"""NCVaR value iteration on the augmented state (x, y).

The value function is tabulated at confidence levels ``y_1 = 0 < y_2 < ...``
and the product ``y * V(x, y)`` is interpolated linearly between nodes. A
Bellman backup at level ``y`` solves

    max  sum_j P_j * I_j(u_j) / y
    s.t. sum_j P_j * u_j = y,  0 <= u_j <= kappa(x, a)

with ``u_j = y * xi_j`` and ``I_j`` the (concave, piecewise-linear) curve of
successor ``j``. Because every ``I_j`` is concave the problem is a separable
resource allocation: pour mass ``y`` into curve segments in order of
decreasing slope.

Two implementations live here. :func:`inner_max` / :func:`bellman` work on a
single (x, y) and are kept simple; :class:`BellmanOperator` does a whole
Jacobi sweep with numpy and is what :func:`value_iteration` runs.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError, ValidationError
from .mdp import AmbiguitySpec, Mdp, check
from .riskcore import ZERO_PROB

CONCAVITY_TOL = 1e-9
FEASIBLE_RTOL = 1e-12


# --------------------------------------------------------------------------
# grid


@dataclass(frozen=True, eq=False)
class YGrid:
    """Confidence-level nodes: 0, then a geometric sequence up to ``y_max``."""

    nodes: np.ndarray
    theta: float

    @property
    def y_max(self) -> float:
        return float(self.nodes[-1])

    @property
    def n(self) -> int:
        return self.nodes.size

    def index_of(self, y, rtol=1e-12):
        """Index of the node equal to ``y`` (relative tolerance), else None."""
        i = int(np.searchsorted(self.nodes, y))
        for j in (i - 1, i):
            if 0 <= j < self.n and abs(self.nodes[j] - y) <= rtol * max(1.0, abs(y)):
                return j
        return None


def make_ygrid(n=21, y_min=1e-4, y_max=1.0) -> YGrid:
    """``n`` nodes ``{0, y_min, y_min*theta, ..., y_max}`` with
    ``theta = (y_max / y_min) ** (1 / (n - 2))``."""
    n = int(n)
    if n < 3:
        raise DomainError(f"y-grid needs at least 3 nodes, got {n}")
    y_min, y_max = float(y_min), float(y_max)
    if not (0.0 < y_min < y_max) or not math.isfinite(y_max):
        raise DomainError(f"need 0 < y_min < y_max, got y_min={y_min}, y_max={y_max}")
    theta = (y_max / y_min) ** (1.0 / (n - 2))
    nodes = np.empty(n)
    nodes[0] = 0.0
    nodes[1:] = y_min * theta ** np.arange(n - 1)
    nodes[1] = y_min
    nodes[-1] = y_max
    nodes.flags.writeable = False
    return YGrid(nodes=nodes, theta=theta)


def grid_for(amb: AmbiguitySpec, n=21, y_min=1e-4) -> YGrid:
    """Grid whose top node is max(1, K_max), so y * xi never leaves it."""
    return make_ygrid(n, y_min, amb.y_max())


# --------------------------------------------------------------------------
# interpolation and concavity


def interpolate(v, ygrid: YGrid, x, y) -> float:
    """Linear interpolation of ``y * V(x, y)`` between grid nodes."""
    y = float(y)
    if not 0.0 <= y <= ygrid.y_max * (1 + FEASIBLE_RTOL):
        raise DomainError(f"y={y} outside [0, {ygrid.y_max}]")
    row = np.asarray(v)[x]
    return float(np.interp(min(y, ygrid.y_max), ygrid.nodes, ygrid.nodes * row))


def node_slopes(v, ygrid: YGrid) -> np.ndarray:
    """Slopes of the interpolated ``y * V`` on each grid interval, shape (S, N-1)."""
    g = ygrid.nodes * np.asarray(v)
    return np.diff(g, axis=-1) / np.diff(ygrid.nodes)


@dataclass(frozen=True)
class ConcavityViolation:
    state: int
    node: int
    excess: float


def _slope_tol(slopes):
    scale = float(np.abs(slopes).max()) if np.size(slopes) else 0.0
    return CONCAVITY_TOL * max(1.0, scale)


def check_concavity(v, ygrid: YGrid) -> list:
    """States where ``y * V(x, y)`` fails to be concave across the nodes.

    A violation at ``node`` i means the slope into node i+1 exceeds the slope
    into node i by more than 1e-9 (relative to the largest slope, floor 1).
    """
    sl = node_slopes(v, ygrid)
    jump = np.diff(sl, axis=-1)
    tol = _slope_tol(sl)
    bad = np.argwhere(jump > tol)
    return [ConcavityViolation(int(x), int(k) + 1, float(jump[x, k])) for x, k in bad]


# --------------------------------------------------------------------------
# single-envelope reference path


@dataclass
class EnvelopeProblem:
    """One inner maximisation: level ``y``, budget, successor probabilities and
    successor curves ``(nodes, values)`` of ``u -> I(u)``."""

    y: float
    budget: float
    probs: np.ndarray
    curves: Sequence
    label: str = ""


def inner_max(prob: EnvelopeProblem):
    """Greedy segment allocation. Returns ``(value, xi)`` with ``xi`` aligned
    to ``prob.probs``.

    If ``y`` exceeds the budget no unit-mass density fits under the cap. The
    allocation then saturates: every successor gets ``u = budget`` and the
    missing mass ``1 - budget / y`` is dropped (it carries no future cost).
    This keeps ``y * T[V]`` concave in ``y`` for non-negative costs.
    """
    y = float(prob.y)
    if not y > 0.0:
        raise DomainError(f"inner_max needs y > 0, got {y}")
    p = np.asarray(prob.probs, dtype=float)
    budget = float(prob.budget)
    curves = [(np.asarray(n, float), np.asarray(g, float)) for n, g in prob.curves]
    top = min(n[-1] for n, _ in curves)
    live = p > ZERO_PROB
    cap = min(budget, top)
    segs = []  # (slope, length in mass units, successor)
    for j in range(p.size):
        if not live[j]:
            continue
        nodes, g = curves[j]
        sl = np.diff(g) / np.diff(nodes)
        tol = _slope_tol(sl)
        if np.any(np.diff(sl) > tol):
            where = f" ({prob.label})" if prob.label else ""
            raise NumericError(f"successor curve {j} is not concave{where}")
        for k in range(sl.size):
            lo, hi = nodes[k], min(nodes[k + 1], cap)
            if hi > lo:
                segs.append((sl[k], p[j] * (hi - lo), j))
    order = sorted(range(len(segs)), key=lambda i: -segs[i][0])
    left = y
    total = 0.0
    mass = np.zeros(p.size)
    for i in order:
        if left <= 0.0:
            break
        slope, length, j = segs[i]
        take = min(length, left)
        total += take * slope
        mass[j] += take
        left -= take
    xi = np.zeros(p.size)
    xi[live] = mass[live] / p[live] / y
    return float(total / y), xi


def bellman(v, mdp: Mdp, amb: AmbiguitySpec, ygrid: YGrid, x: int, i: int):
    """Backup at state ``x`` and node ``i``; returns ``(value, action, xi)``.

    ``xi`` is over ``mdp.succ[x, action]`` slots. Node 0 uses the worst-case
    successor (the y -> 0 limit) and reports the density that puts all mass on
    it. Ties go to the lowest action index.
    """
    v = np.asarray(v, dtype=float)
    kappa = amb.budget(mdp)
    nodes = ygrid.nodes
    best = (math.inf, -1, None)
    for a in np.flatnonzero(mdp.action_mask[x]):
        p = mdp.prob[x, a]
        succ = mdp.succ[x, a]
        if i == 0:
            live = np.flatnonzero(p > ZERO_PROB)
            j = live[np.argmax(v[succ[live], 0])]
            inner = v[succ[j], 0]
            xi = np.zeros(p.size)
            xi[j] = 1.0 / p[j]
        else:
            curves = [(nodes, nodes * v[s]) for s in succ]
            inner, xi = inner_max(
                EnvelopeProblem(nodes[i], kappa[x, a], p, curves, label=f"state {x}, action {a}")
            )
        q = mdp.cost[x, a] + mdp.gamma * inner
        if q < best[0]:
            best = (q, int(a), xi)
    return best


# --------------------------------------------------------------------------
# vectorised operator


class EnvelopeTable:
    """Sorted segment tables for a fixed V, queried at arbitrary (row, y).

    Row ``r`` is the flattened (x, a) pair ``x * A + a``.
    """

    def __init__(self, op: BellmanOperator, v):
        self.op = op
        v = np.asarray(v, dtype=float)
        sl = op._segment_slopes(v)
        order = np.argsort(-sl, axis=1, kind="stable")
        self.slope = np.take_along_axis(sl, order, axis=1)
        self.length = np.take_along_axis(op.seg_len, order, axis=1)
        self.owner = order // (op.N - 1)
        zeros = np.zeros((sl.shape[0], 1))
        self.cum_len = np.hstack([zeros, np.cumsum(self.length, axis=1)])
        self.cum_val = np.hstack([zeros, np.cumsum(self.length * self.slope, axis=1)])
        self.g = op.nodes * v  # (S, N)

    def query(self, rows, y):
        """Envelope value sum_j P_j I_j(u_j) / y and maximiser xi, shape (n, m)."""
        op = self.op
        rows = np.asarray(rows)
        y = np.asarray(y, dtype=float)
        cl = self.cum_len[rows]
        M = self.length.shape[1]
        k = np.minimum((cl[:, 1:] < y[:, None]).sum(axis=1), M - 1)
        ar = np.arange(rows.size)
        ln = self.length[rows, k]
        filled_last = np.clip(y - cl[ar, k], 0.0, ln)
        G = self.cum_val[rows, k] + filled_last * self.slope[rows, k]
        # mass per successor slot
        fill = np.clip(y[:, None] - cl[:, :-1], 0.0, self.length[rows])
        owner = self.owner[rows]
        P = op.P[rows]
        mass = np.zeros((rows.size, op.m))
        for j in range(op.m):
            mass[:, j] = np.where(owner == j, fill, 0.0).sum(axis=1)
        live = P > ZERO_PROB
        xi = np.zeros_like(mass)
        np.divide(mass, P * y[:, None], out=xi, where=live)
        # y above the budget saturates every slot at the cap (xi = kappa / y)
        return G / y, xi


class BellmanOperator:
    """Interpolated NCVaR Bellman operator on a fixed (mdp, budget, grid).

    ``threads > 1`` splits each sweep over blocks of (x, a) rows; every block
    writes disjoint outputs, so results do not depend on the thread count.
    """

    def __init__(self, mdp: Mdp, amb: AmbiguitySpec, ygrid: YGrid, threads: int = 1):
        if not amb.solvable:
            raise ValidationError("KL ambiguity is solved as an EVaR problem, not by NCVaR value iteration")
        kappa = amb.budget(mdp)
        if ygrid.y_max < amb.y_max() * (1 - FEASIBLE_RTOL):
            raise ValidationError(f"y-grid top {ygrid.y_max} is below max(1, K_max)={amb.y_max()}")
        self.mdp = mdp
        self.amb = amb
        self.ygrid = ygrid
        self.threads = max(1, int(threads))
        S, A, m = mdp.succ.shape
        self.S, self.A, self.m = S, A, m
        self.N = ygrid.n
        self.nodes = ygrid.nodes
        self.targets = ygrid.nodes[1:]
        self.succ = mdp.succ.reshape(S * A, m)
        self.P = mdp.prob.reshape(S * A, m)
        self.kappa = kappa.reshape(S * A)
        self.cost = mdp.cost.reshape(S * A)
        self.enabled = mdp.action_mask.reshape(S * A)
        self.gamma = mdp.gamma
        cap = np.minimum(self.kappa, ygrid.y_max)
        lo = self.nodes[:-1]
        hi = np.minimum(self.nodes[1:][None, :], cap[:, None])  # (SA, N-1)
        width = np.clip(hi - lo[None, :], 0.0, None)
        P_live = np.where(self.P > ZERO_PROB, self.P, 0.0)
        self.seg_len = (P_live[:, :, None] * width[:, None, :]).reshape(S * A, m * (self.N - 1))
        self.live = P_live > 0

    def _segment_slopes(self, v):
        sl = node_slopes(v, self.ygrid)  # (S, N-1)
        return sl[self.succ].reshape(self.succ.shape[0], -1)

    def _check(self, v):
        bad = check_concavity(v, self.ygrid)
        if bad:
            b = bad[0]
            raise NumericError(
                f"y*V is not concave at state {b.state}, node {b.node} (excess {b.excess:.3e}); "
                f"{len(bad)} violation(s)"
            )

    def _block(self, v, sl_state, g, lo, hi):
        """Envelope values for rows [lo, hi) at every positive node: (rows, N-1)."""
        succ = self.succ[lo:hi]
        sl = sl_state[succ].reshape(hi - lo, -1)
        order = np.argsort(-sl, axis=1, kind="stable")
        sl = np.take_along_axis(sl, order, axis=1)
        ln = np.take_along_axis(self.seg_len[lo:hi], order, axis=1)
        cum_len = np.cumsum(ln, axis=1)
        cum_val = np.cumsum(ln * sl, axis=1)
        M = ln.shape[1]
        t = self.targets
        k = np.minimum((cum_len[:, None, :] < t[None, :, None]).sum(axis=2), M - 1)
        ln_k = np.take_along_axis(ln, k, axis=1)
        sl_k = np.take_along_axis(sl, k, axis=1)
        prev_len = np.take_along_axis(cum_len, k, axis=1) - ln_k
        prev_val = np.take_along_axis(cum_val, k, axis=1) - ln_k * sl_k
        # targets beyond the total capacity saturate at the full sum
        return prev_val + np.clip(t[None, :] - prev_len, 0.0, ln_k) * sl_k

    def q_values(self, v, check_concave=True) -> np.ndarray:
        """Q(x, a, y_i), shape (S, A, N); disabled actions are +inf."""
        v = np.asarray(v, dtype=float)
        if check_concave:
            self._check(v)
        sl_state = node_slopes(v, self.ygrid)
        g = self.nodes * v
        SA = self.succ.shape[0]
        if self.threads == 1:
            G = self._block(v, sl_state, g, 0, SA)
        else:
            bounds = np.linspace(0, SA, self.threads + 1).astype(int)
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(
                    pool.map(lambda b: self._block(v, sl_state, g, b[0], b[1]), zip(bounds[:-1], bounds[1:]))
                )
            G = np.vstack(parts)
        Q = np.empty((SA, self.N))
        Q[:, 1:] = self.cost[:, None] + self.gamma * G / self.targets[None, :]
        worst = np.where(self.live, v[self.succ, 0], -np.inf).max(axis=1)
        Q[:, 0] = self.cost + self.gamma * worst
        Q[~self.enabled] = np.inf
        return Q.reshape(self.S, self.A, self.N)

    def __call__(self, v, check_concave=True):
        """One Jacobi sweep: returns ``(V_next, greedy_actions)``."""
        Q = self.q_values(v, check_concave)
        act = Q.argmin(axis=1)
        return np.take_along_axis(Q, act[:, None, :], axis=1)[:, 0, :], act

    def table(self, v) -> EnvelopeTable:
        return EnvelopeTable(self, v)


# --------------------------------------------------------------------------
# value iteration


@dataclass(eq=False)
class SolveResult:
    """Converged value table with its greedy policy and envelope maximisers.

    ``xi_star[x, i]`` is aligned with ``mdp.succ[x, greedy_action[x, i]]``.
    """

    v_star: np.ndarray
    greedy_action: np.ndarray
    xi_star: np.ndarray
    iterations: int
    final_residual: float
    converged: bool
    mdp: Mdp = field(repr=False)
    amb: AmbiguitySpec = field(repr=False)
    ygrid: YGrid = field(repr=False)
    residuals: list = field(default_factory=list, repr=False)
    _table: EnvelopeTable | None = field(default=None, repr=False)

    @property
    def operator(self) -> BellmanOperator:
        return self.table.op

    @property
    def table(self) -> EnvelopeTable:
        if self._table is None:
            self._table = BellmanOperator(self.mdp, self.amb, self.ygrid).table(self.v_star)
        return self._table

    def value_at(self, x, y) -> float:
        """V*(x, y) off the grid: interpolated ``y * V`` divided by ``y``."""
        if y == 0:
            return float(self.v_star[x, 0])
        return interpolate(self.v_star, self.ygrid, x, y) / y


def extract_policy(v, mdp: Mdp, amb: AmbiguitySpec, ygrid: YGrid, op: BellmanOperator | None = None):
    """Greedy actions and maximiser densities at every (x, node) for a given V."""
    op = op or BellmanOperator(mdp, amb, ygrid)
    v = np.asarray(v, dtype=float)
    Q = op.q_values(v)
    act = Q.argmin(axis=1)  # (S, N)
    table = op.table(v)
    S, N, m = op.S, op.N, op.m
    xi = np.zeros((S, N, m))
    xs = np.repeat(np.arange(S), N - 1)
    ys = np.tile(op.targets, S)
    rows = xs * op.A + act[:, 1:].ravel()
    _, xi_pos = table.query(rows, ys)
    xi[:, 1:, :] = xi_pos.reshape(S, N - 1, m)
    # node 0: all mass on the worst live successor
    rows0 = np.arange(S) * op.A + act[:, 0]
    worst = np.where(op.live[rows0], v[op.succ[rows0], 0], -np.inf).argmax(axis=1)
    xi[np.arange(S), 0, worst] = 1.0 / op.P[rows0, worst]
    return act, xi, table


def value_iteration(
    mdp: Mdp,
    amb: AmbiguitySpec,
    ygrid: YGrid | None = None,
    epsilon: float = 1e-6,
    max_sweeps: int = 2000,
    v0=None,
    threads: int = 1,
    callback=None,
) -> SolveResult:
    """Iterate the interpolated operator from ``v0`` (default zeros) until the
    sup-norm change drops below ``epsilon``.

    Non-convergence is reported through ``converged=False``, not raised.
    ``callback(sweep, v, residual)`` runs after each sweep.
    """
    check(mdp)
    ygrid = ygrid or grid_for(amb)
    op = BellmanOperator(mdp, amb, ygrid, threads)
    v = np.zeros((mdp.n_states, ygrid.n)) if v0 is None else np.array(v0, dtype=float)
    if v.shape != (mdp.n_states, ygrid.n):
        raise ValidationError(f"v0 has shape {v.shape}, expected {(mdp.n_states, ygrid.n)}")
    residual = math.inf
    residuals = []
    sweeps = 0
    while sweeps < max_sweeps:
        v_next, _ = op(v)
        residual = float(np.max(np.abs(v_next - v)))
        v = v_next
        sweeps += 1
        residuals.append(residual)
        if callback is not None:
            callback(sweeps, v, residual)
        if residual < epsilon:
            break
    act, xi, table = extract_policy(v, mdp, amb, ygrid, op)
    return SolveResult(
        v_star=v,
        greedy_action=act,
        xi_star=xi,
        iterations=sweeps,
        final_residual=residual,
        converged=residual < epsilon,
        mdp=mdp,
        amb=amb,
        ygrid=ygrid,
        residuals=residuals,
        _table=table,
    )


# --------------------------------------------------------------------------
# policy execution


class Policy:
    """Greedy policy on the augmented state, vectorised over episodes."""

    def __init__(self, result: SolveResult):
        self.result = result
        self.op = result.operator
        self.table = result.table
        self.nodes = result.ygrid.nodes
        self.y_lo = float(self.nodes[1])
        self.y_hi = float(self.nodes[-1])

    def act(self, x, y):
        """Actions and maximiser densities for arrays of states and levels.

        On a node the stored greedy action and density are used. Between nodes
        the two bracketing nodes' actions are re-evaluated at the exact level
        and the cheaper one wins (lower index on ties).
        """
        res = self.result
        op = self.op
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=float)
        if np.any((y <= 0) | (y > self.y_hi * (1 + FEASIBLE_RTOL))):
            raise DomainError(f"confidence levels must lie in (0, {self.y_hi}]")
        i = np.clip(np.searchsorted(self.nodes, y, side="right") - 1, 1, self.nodes.size - 1)
        on_lo = np.abs(self.nodes[i] - y) <= FEASIBLE_RTOL * np.maximum(1.0, y)
        upper = np.minimum(i + 1, self.nodes.size - 1)
        on_hi = np.abs(self.nodes[upper] - y) <= FEASIBLE_RTOL * np.maximum(1.0, y)
        node = np.where(on_lo, i, np.where(on_hi, upper, -1))
        actions = np.empty(x.size, dtype=np.int64)
        xi = np.empty((x.size, op.m))
        hit = node >= 0
        if hit.any():
            actions[hit] = res.greedy_action[x[hit], node[hit]]
            xi[hit] = res.xi_star[x[hit], node[hit]]
        miss = ~hit
        if miss.any():
            xm, ym = x[miss], y[miss]
            a_lo = res.greedy_action[xm, i[miss]]
            a_hi = res.greedy_action[xm, upper[miss]]
            G_lo, xi_lo = self.table.query(xm * op.A + a_lo, ym)
            G_hi, xi_hi = self.table.query(xm * op.A + a_hi, ym)
            q_lo = op.cost[xm * op.A + a_lo] + op.gamma * G_lo
            q_hi = op.cost[xm * op.A + a_hi] + op.gamma * G_hi
            take_hi = (q_hi < q_lo) | ((q_hi == q_lo) & (a_hi < a_lo))
            actions[miss] = np.where(take_hi, a_hi, a_lo)
            xi[miss] = np.where(take_hi[:, None], xi_hi, xi_lo)
        return actions, xi

    def next_level(self, y, xi, slot):
        """Level update y * xi(x'), clamped to [y_2, y_max]."""
        y = np.asarray(y, dtype=float)
        slot = np.asarray(slot)
        return np.clip(y * xi[np.arange(y.size), slot], self.y_lo, self.y_hi)


def policy_step(result: SolveResult, ygrid: YGrid, x: int, y: float, observed_next: int):
    """One step of the optimal policy: ``(action, y_next)``.

    ``observed_next`` must be a successor of (x, action) under the nominal
    kernel; the new level is ``y * xi*(observed_next)`` clamped to the grid.
    """
    mdp = result.mdp
    if not 0 <= x < mdp.n_states:
        raise DomainError(f"unknown state {x}")
    if ygrid is not result.ygrid and not np.array_equal(ygrid.nodes, result.ygrid.nodes):
        raise ValidationError("y-grid does not match the solved result")
    pol = Policy(result)
    a, xi = pol.act(np.array([x]), np.array([y]))
    a = int(a[0])
    slots = np.flatnonzero((mdp.succ[x, a] == observed_next) & (mdp.prob[x, a] > 0))
    if slots.size == 0:
        raise DomainError(f"state {observed_next} is not a successor of ({x}, {a})")
    y_next = pol.next_level(np.array([y]), xi, slots[:1])[0]
    return a, float(y_next)
