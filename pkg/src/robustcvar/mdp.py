"""Tabular MDP model, ambiguity specification, gridworld builder and JSON I/O.

Transition kernels are stored sparsely: every (state, action) row keeps a
fixed number ``m`` of successor slots (``succ``, ``prob``), padded with
zero-probability self-loops. Gridworld rows have at most four successors, so a
dense S x A x S kernel would be wasteful at the 3393-state scale.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

ROW_ATOL = 1e-10

# east, south, west, north as (drow, dcol)
MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))
ACTION_NAMES = ("east", "south", "west", "north")

AMBIGUITY_KINDS = ("none", "rn_fixed", "kl_fixed", "rn_decision_dependent")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GridInfo:
    """Layout metadata kept on gridworld MDPs (needed for rendering)."""

    rows: int
    cols: int
    start: tuple
    goal: tuple
    obstacles: tuple

    def state_of(self, cell) -> int:
        r, c = cell
        return int(r) * self.cols + int(c)

    def cell_of(self, state: int):
        if not 0 <= state < self.rows * self.cols:
            return None
        return divmod(int(state), self.cols)


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite MDP (X, A, C, P, gamma, x0) with a padded sparse kernel.

    Arrays: ``action_mask`` (S, A) bool, ``cost`` (S, A), ``succ`` (S, A, m)
    int, ``prob`` (S, A, m). Use :func:`make_mdp` or :func:`from_dense` to
    build one; they canonicalise padding so equality is structural.
    """

    action_mask: np.ndarray
    cost: np.ndarray
    succ: np.ndarray
    prob: np.ndarray
    gamma: float
    start_state: int
    goal_state: int | None = None
    grid: GridInfo | None = None

    @property
    def n_states(self) -> int:
        return self.cost.shape[0]

    @property
    def n_actions(self) -> int:
        return self.cost.shape[1]

    @property
    def actions_per_state(self):
        return [tuple(np.flatnonzero(row).tolist()) for row in self.action_mask]

    def c_max(self) -> float:
        c = self.cost[self.action_mask]
        return float(np.abs(c).max()) if c.size else 0.0

    def dense_kernel(self) -> np.ndarray:
        """(S, A, S) array; only sensible for small MDPs."""
        S, A, m = self.succ.shape
        P = np.zeros((S, A, S))
        s_idx = np.repeat(np.arange(S), A * m)
        a_idx = np.tile(np.repeat(np.arange(A), m), S)
        np.add.at(P, (s_idx, a_idx, self.succ.ravel()), self.prob.ravel())
        return P

    def __eq__(self, other):
        if not isinstance(other, Mdp):
            return NotImplemented
        return (
            np.array_equal(self.action_mask, other.action_mask)
            and np.array_equal(self.cost, other.cost)
            and np.array_equal(self.succ, other.succ)
            and np.array_equal(self.prob, other.prob)
            and self.gamma == other.gamma
            and self.start_state == other.start_state
            and self.goal_state == other.goal_state
            and self.grid == other.grid
        )

    __hash__ = None


def make_mdp(transitions, cost, gamma, start_state, action_mask=None, goal_state=None, grid=None) -> Mdp:
    """Build an :class:`Mdp` from per-row successor lists.

    ``transitions[x][a]`` is a list of ``(x_next, prob)`` pairs (duplicates are
    summed, zero entries dropped). ``cost[x][a]`` is the stage cost. Disabled
    actions (``action_mask[x][a]`` false) get cost 0 and an empty row.
    """
    cost = np.asarray(cost, dtype=float)
    S, A = cost.shape
    mask = np.ones((S, A), bool) if action_mask is None else np.asarray(action_mask, bool)
    if mask.shape != (S, A):
        raise ValidationError(f"action mask shape {mask.shape} != cost shape {(S, A)}")
    rows = {}
    m = 1
    for x in range(S):
        for a in range(A):
            if not mask[x, a]:
                continue
            merged = {}
            for nxt, p in transitions[x][a]:
                nxt = int(nxt)
                if not 0 <= nxt < S:
                    raise ValidationError(f"successor {nxt} of ({x},{a}) is not a state")
                merged[nxt] = merged.get(nxt, 0.0) + float(p)
            row = sorted((k, v) for k, v in merged.items() if v != 0.0)
            rows[x, a] = row
            m = max(m, len(row))
    succ = np.repeat(np.arange(S)[:, None, None], A, axis=1).repeat(m, axis=2)
    prob = np.zeros((S, A, m))
    for (x, a), row in rows.items():
        for j, (nxt, p) in enumerate(row):
            succ[x, a, j] = nxt
            prob[x, a, j] = p
    cost = np.where(mask, cost, 0.0)
    return Mdp(
        action_mask=_frozen(mask, bool),
        cost=_frozen(cost, float),
        succ=_frozen(succ, np.int64),
        prob=_frozen(prob, float),
        gamma=float(gamma),
        start_state=int(start_state),
        goal_state=None if goal_state is None else int(goal_state),
        grid=grid,
    )


def from_dense(kernel, cost, gamma, start_state, action_mask=None, goal_state=None) -> Mdp:
    """Build an :class:`Mdp` from a dense (S, A, S) kernel."""
    P = np.asarray(kernel, dtype=float)
    S, A, _ = P.shape
    transitions = [
        [[(int(j), P[x, a, j]) for j in np.flatnonzero(P[x, a])] for a in range(A)] for x in range(S)
    ]
    return make_mdp(transitions, cost, gamma, start_state, action_mask, goal_state)


# --------------------------------------------------------------------------
# ambiguity


@dataclass(frozen=True, eq=False)
class AmbiguitySpec:
    """Uncertainty model around the nominal kernel.

    kind:
      ``none``                   nominal kernel, budget 1 everywhere
      ``rn_fixed``               density ratio P~/P <= K for every (x, a)
      ``kl_fixed``               KL(P~, P) <= ln K (K stores kappa >= 1)
      ``rn_decision_dependent``  P~/P <= budget_field[x, a] in [1, K_max]
    """

    kind: str = "none"
    K: float = 1.0
    budget_field: np.ndarray | None = None
    K_max: float | None = None

    def __post_init__(self):
        if self.kind not in AMBIGUITY_KINDS:
            raise ValidationError(f"unknown ambiguity kind {self.kind!r}; expected one of {AMBIGUITY_KINDS}")
        K = float(self.K)
        object.__setattr__(self, "K", K)
        if self.kind in ("rn_fixed", "kl_fixed") and not (K >= 1.0 and math.isfinite(K)):
            raise ValidationError(f"fixed budget must be a finite value >= 1, got {K!r}")
        if self.kind == "rn_decision_dependent":
            if self.budget_field is None:
                raise ValidationError("rn_decision_dependent needs a budget_field")
            bf = np.array(self.budget_field, dtype=float)
            k_max = float(bf.max()) if self.K_max is None else float(self.K_max)
            if not np.all(np.isfinite(bf)) or bf.min() < 1.0 or bf.max() > k_max:
                raise ValidationError(
                    f"budget field must lie in [1, K_max={k_max}] (got [{bf.min()}, {bf.max()}])"
                )
            bf.flags.writeable = False
            object.__setattr__(self, "budget_field", bf)
            object.__setattr__(self, "K_max", k_max)
        elif self.K_max is None:
            object.__setattr__(self, "K_max", K if self.kind == "rn_fixed" else 1.0)

    @property
    def solvable(self) -> bool:
        """Whether NCVaR value iteration applies (KL needs an EVaR solver)."""
        return self.kind != "kl_fixed"

    def budget(self, mdp: Mdp) -> np.ndarray:
        """Per-(x, a) density-ratio cap kappa(x, a) used by the solver."""
        shape = (mdp.n_states, mdp.n_actions)
        if self.kind == "none":
            return np.ones(shape)
        if self.kind == "rn_fixed":
            return np.full(shape, self.K)
        if self.kind == "rn_decision_dependent":
            if self.budget_field.shape != shape:
                raise ValidationError(f"budget field shape {self.budget_field.shape} != {shape}")
            return np.array(self.budget_field)
        raise ValidationError("KL ambiguity has no density-ratio budget; reduce it to an EVaR level instead")

    def y_max(self) -> float:
        return max(1.0, float(self.K_max))


def random_budget_field(mdp: Mdp, k_max: float, seed: int, k_min: float = 1.0) -> np.ndarray:
    """kappa(x, a) drawn uniformly from [k_min, k_max] with a seeded generator."""
    rng = np.random.default_rng(seed)
    return rng.uniform(k_min, k_max, size=(mdp.n_states, mdp.n_actions))


# --------------------------------------------------------------------------
# gridworld


@dataclass(frozen=True)
class GridSpec:
    """Gridworld parameters. Cells are (row, col), zero-based.

    Obstacles are either explicit (``obstacles``) or ``obstacle_count`` cells
    drawn without replacement from the free cells with ``seed``.
    """

    rows: int = 64
    cols: int = 53
    start: tuple = (60, 50)
    goal: tuple = (60, 2)
    obstacles: tuple | None = None
    obstacle_count: int = 80
    seed: int | None = 0
    move_cost: float = 1.0
    collision_cost: float = 40.0
    intended_prob: float = 0.95
    gamma: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(int(v) for v in self.start))
        object.__setattr__(self, "goal", tuple(int(v) for v in self.goal))
        if self.obstacles is not None:
            object.__setattr__(self, "obstacles", tuple(tuple(int(v) for v in c) for c in self.obstacles))

    @classmethod
    def from_dict(cls, d) -> GridSpec:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = {
            "rows": self.rows,
            "cols": self.cols,
            "start": list(self.start),
            "goal": list(self.goal),
            "move_cost": self.move_cost,
            "collision_cost": self.collision_cost,
            "intended_prob": self.intended_prob,
            "gamma": self.gamma,
        }
        if self.obstacles is not None:
            d["obstacles"] = [list(c) for c in self.obstacles]
        else:
            d["obstacle_count"] = self.obstacle_count
            d["seed"] = self.seed
        return d

    def validate(self):
        def inside(cell):
            return len(cell) == 2 and 0 <= cell[0] < self.rows and 0 <= cell[1] < self.cols

        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise ValidationError("grid needs at least two cells")
        if not inside(self.start) or not inside(self.goal):
            raise ValidationError("start and goal must lie inside the grid")
        if self.start == self.goal:
            raise ValidationError("start and goal must differ")
        if not 0.0 < self.intended_prob <= 1.0:
            raise ValidationError("intended_prob must lie in (0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError("gamma must lie in [0, 1)")
        if not (math.isfinite(self.move_cost) and math.isfinite(self.collision_cost)):
            raise ValidationError("costs must be finite")
        if self.obstacles is not None:
            for cell in self.obstacles:
                if not inside(cell):
                    raise ValidationError(f"obstacle {cell} outside the grid")
                if cell == self.goal:
                    raise ValidationError("goal cannot be an obstacle")
                if cell == self.start:
                    raise ValidationError("start cannot be an obstacle")
        else:
            free = self.rows * self.cols - 2
            if self.obstacle_count < 0 or self.obstacle_count > free:
                raise ValidationError(f"obstacle_count={self.obstacle_count} exceeds the {free} free cells")
            if self.obstacle_count > 0 and self.seed is None:
                raise ValidationError("obstacle_count needs a seed")


def place_obstacles(spec: GridSpec, seed) -> tuple:
    """Explicit obstacles, or ``obstacle_count`` distinct free cells (row-major
    order) drawn uniformly without replacement."""
    if spec.obstacles is not None:
        return tuple(sorted(set(spec.obstacles)))
    if spec.obstacle_count == 0:
        return ()
    banned = {spec.start, spec.goal}
    free = [(r, c) for r in range(spec.rows) for c in range(spec.cols) if (r, c) not in banned]
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(free), size=spec.obstacle_count, replace=False)
    return tuple(sorted(free[i] for i in pick))


def build_gridworld(spec: GridSpec, rng_seed=None) -> Mdp:
    """Stochastic gridworld: one state per cell plus an absorbing terminal.

    Each move succeeds with ``intended_prob``; the remainder is split evenly
    over the other three directions. Off-grid moves stay put. The stage cost
    is ``collision_cost`` when acting from an obstacle cell and ``move_cost``
    otherwise, so a collision is paid on the step after entering the cell.
    The goal cell moves to the terminal state at zero cost.
    """
    spec.validate()
    seed = spec.seed if rng_seed is None else rng_seed
    obstacles = place_obstacles(spec, seed)
    R, Cn = spec.rows, spec.cols
    n_cells = R * Cn
    terminal = n_cells
    S = n_cells + 1
    goal = spec.goal[0] * Cn + spec.goal[1]
    obstacle_set = set(obstacles)
    stray = (1.0 - spec.intended_prob) / 3.0

    cost = np.zeros((S, 4))
    transitions = []
    for s in range(n_cells):
        r, c = divmod(s, Cn)
        if s == goal:
            transitions.append([[(terminal, 1.0)]] * 4)
            continue
        step_cost = spec.collision_cost if (r, c) in obstacle_set else spec.move_cost
        cost[s, :] = step_cost
        rows = []
        for a in range(4):
            row = []
            for d, (dr, dc) in enumerate(MOVES):
                p = spec.intended_prob if d == a else stray
                if p == 0.0:
                    continue
                rr, cc = r + dr, c + dc
                nxt = rr * Cn + cc if 0 <= rr < R and 0 <= cc < Cn else s
                row.append((nxt, p))
            rows.append(row)
        transitions.append(rows)
    transitions.append([[(terminal, 1.0)]] * 4)
    grid = GridInfo(rows=R, cols=Cn, start=spec.start, goal=spec.goal, obstacles=obstacles)
    return make_mdp(
        transitions,
        cost,
        spec.gamma,
        start_state=spec.start[0] * Cn + spec.start[1],
        goal_state=goal,
        grid=grid,
    )


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    message: str
    where: tuple = field(default=())


def validate(mdp: Mdp, c_max: float | None = None) -> list:
    """Structural checks; returns a (possibly empty) list of :class:`Diagnostic`."""
    out = []
    mask = mdp.action_mask
    S = mdp.n_states
    if not 0.0 <= mdp.gamma < 1.0:
        out.append(Diagnostic("gamma", f"gamma={mdp.gamma} outside [0, 1)"))
    if not 0 <= mdp.start_state < S:
        out.append(Diagnostic("start", f"start state {mdp.start_state} out of range"))
    no_action = np.flatnonzero(~mask.any(axis=1))
    for x in no_action:
        out.append(Diagnostic("no_action", f"state {x} has no enabled action", (int(x),)))
    neg = np.argwhere((mdp.prob < 0).any(axis=2) & mask)
    for x, a in neg:
        out.append(Diagnostic("negative_prob", f"negative probability in row ({x},{a})", (int(x), int(a))))
    sums = mdp.prob.sum(axis=2)
    bad = np.argwhere((np.abs(sums - 1.0) > ROW_ATOL) & mask)
    for x, a in bad:
        out.append(
            Diagnostic("row_sum", f"row ({x},{a}) sums to {sums[x, a]!r}", (int(x), int(a)))
        )
    c = mdp.cost[mask]
    if not np.all(np.isfinite(c)):
        out.append(Diagnostic("cost_bound", "non-finite stage cost"))
    elif c_max is not None and c.size and np.abs(c).max() > c_max:
        out.append(Diagnostic("cost_bound", f"|cost| reaches {np.abs(c).max()!r} > C_max={c_max!r}"))
    if mdp.goal_state is not None and 0 <= mdp.start_state < S:
        if not _reachable(mdp, mdp.start_state, mdp.goal_state):
            out.append(
                Diagnostic("unreachable_goal", f"goal {mdp.goal_state} unreachable from {mdp.start_state}")
            )
    return out


def _reachable(mdp: Mdp, src: int, dst: int) -> bool:
    seen = np.zeros(mdp.n_states, bool)
    seen[src] = True
    queue = deque([src])
    while queue:
        x = queue.popleft()
        if x == dst:
            return True
        live = (mdp.prob[x] > 0) & mdp.action_mask[x][:, None]
        for nxt in np.unique(mdp.succ[x][live]):
            if not seen[nxt]:
                seen[nxt] = True
                queue.append(int(nxt))
    return False


def check(mdp: Mdp):
    """Raise :class:`ValidationError` listing every hard invariant violation."""
    hard = [d for d in validate(mdp) if d.kind != "unreachable_goal"]
    if hard:
        shown = "; ".join(d.message for d in hard[:5])
        more = f" (+{len(hard) - 5} more)" if len(hard) > 5 else ""
        raise ValidationError(f"invalid MDP: {shown}{more}")


# --------------------------------------------------------------------------
# JSON I/O

FORMAT_TAG = "robustcvar-mdp"


def fmt_float(x) -> str:
    """17 significant digits: enough to round-trip any double."""
    x = float(x)
    if not math.isfinite(x):
        raise ValidationError(f"cannot serialise non-finite number {x!r}")
    s = format(x, ".17g")
    if "e" not in s and "." not in s:
        s += ".0"
    return s


def _num_list(xs) -> str:
    return "[" + ", ".join(fmt_float(v) for v in xs) + "]"


def dumps_mdp(mdp: Mdp) -> str:
    lines = ["{", f'  "format": "{FORMAT_TAG}",', '  "version": 1,']
    lines.append(f'  "n_states": {mdp.n_states},')
    lines.append(f'  "n_actions": {mdp.n_actions},')
    lines.append(f'  "gamma": {fmt_float(mdp.gamma)},')
    lines.append(f'  "start_state": {mdp.start_state},')
    lines.append(f'  "goal_state": {"null" if mdp.goal_state is None else mdp.goal_state},')
    if mdp.grid is not None:
        g = mdp.grid
        obs = ", ".join(f"[{r}, {c}]" for r, c in g.obstacles)
        lines.append(
            f'  "grid": {{"rows": {g.rows}, "cols": {g.cols}, "start": [{g.start[0]}, {g.start[1]}], '
            f'"goal": [{g.goal[0]}, {g.goal[1]}], "obstacles": [{obs}]}},'
        )
    states = []
    for x in range(mdp.n_states):
        acts = np.flatnonzero(mdp.action_mask[x])
        parts = []
        for a in acts:
            live = mdp.prob[x, a] != 0.0
            pairs = ", ".join(
                f"[{int(s)}, {fmt_float(p)}]" for s, p in zip(mdp.succ[x, a][live], mdp.prob[x, a][live])
            )
            parts.append(f'{{"a": {int(a)}, "cost": {fmt_float(mdp.cost[x, a])}, "next": [{pairs}]}}')
        states.append("    [" + ", ".join(parts) + "]")
    lines.append('  "states": [')
    lines.append(",\n".join(states))
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_mdp(mdp: Mdp, path):
    Path(path).write_text(dumps_mdp(mdp), encoding="utf-8")


def loads_mdp(text: str, path=None) -> Mdp:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed MDP file: {exc.msg}", path, exc.lineno, exc.colno) from None
    try:
        if doc.get("format") != FORMAT_TAG:
            raise ParseError(f"not a {FORMAT_TAG} document", path)
        S = int(doc["n_states"])
        A = int(doc["n_actions"])
        states = doc["states"]
        if len(states) != S:
            raise ParseError(f"expected {S} state entries, found {len(states)}", path)
        mask = np.zeros((S, A), bool)
        cost = np.zeros((S, A))
        transitions = [[[] for _ in range(A)] for _ in range(S)]
        for x, entries in enumerate(states):
            for e in entries:
                a = int(e["a"])
                if not 0 <= a < A:
                    raise ParseError(f"state {x}: action {a} out of range", path)
                mask[x, a] = True
                cost[x, a] = float(e["cost"])
                transitions[x][a] = [(int(s), float(p)) for s, p in e["next"]]
        grid = None
        if doc.get("grid") is not None:
            g = doc["grid"]
            grid = GridInfo(
                rows=int(g["rows"]),
                cols=int(g["cols"]),
                start=tuple(int(v) for v in g["start"]),
                goal=tuple(int(v) for v in g["goal"]),
                obstacles=tuple(tuple(int(v) for v in c) for c in g["obstacles"]),
            )
        goal = doc.get("goal_state")
        mdp = make_mdp(
            transitions,
            cost,
            float(doc["gamma"]),
            int(doc["start_state"]),
            action_mask=mask,
            goal_state=None if goal is None else int(goal),
            grid=grid,
        )
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ParseError(f"malformed MDP document: {exc!r}", path) from None
    check(mdp)
    return mdp


def load_mdp(path) -> Mdp:
    return loads_mdp(Path(path).read_text(encoding="utf-8"), path)
