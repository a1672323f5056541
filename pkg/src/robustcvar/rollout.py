"""Monte-Carlo checks of a solved policy.

Episodes run in lock-step as numpy arrays. They are split into fixed blocks
of ``BLOCK`` episodes, and block ``b`` draws from
``SeedSequence(seed).spawn(n_blocks)[b]``, so results depend only on the
seed and the episode count, never on how blocks are scheduled.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ValidationError
from .mdp import AmbiguitySpec, Mdp
from .riskcore import ZERO_PROB, cvar, empirical_distribution
from .solver import Policy, SolveResult

BLOCK = 1000


@dataclass
class RolloutReport:
    n_episodes: int
    horizon: int
    cost_samples: np.ndarray = field(repr=False)
    empirical_mean: float
    empirical_cvar_alpha: float
    alpha: float
    kernel_descriptor: str
    seed: int
    standard_error: float = math.nan
    cvar_standard_error: float = math.nan

    def to_dict(self, with_samples=False) -> dict:
        d = asdict(self)
        d.pop("cost_samples")
        if with_samples:
            d["cost_samples"] = [float(c) for c in self.cost_samples]
        return d

    def to_json(self, with_samples=False) -> str:
        return json.dumps(self.to_dict(with_samples), indent=2, sort_keys=True) + "\n"

    def write_samples(self, path):
        Path(path).write_text("".join(f"{c:.17g}\n" for c in self.cost_samples), encoding="utf-8")


# --------------------------------------------------------------------------
# kernels


def sample_kernel(mdp: Mdp, amb: AmbiguitySpec, seed) -> np.ndarray:
    """Random kernel with P~/P <= budget on every row, same layout as ``mdp.prob``.

    Each row starts from Dirichlet(1) weights on the nominal support and is
    water-filled: weights are scaled up until the row sums to one, with every
    slot clipped at its cap ``budget * P``.
    """
    if amb.kind not in ("none", "rn_fixed", "rn_decision_dependent"):
        raise ValidationError(f"kernel sampling supports density-ratio sets only, not {amb.kind!r}")
    kappa = amb.budget(mdp)
    P = np.array(mdp.prob)
    live = P > ZERO_PROB
    caps = np.where(live, kappa[:, :, None] * P, 0.0)
    if np.any(caps.sum(axis=2)[mdp.action_mask] < 1.0 - 1e-10):
        raise ValidationError("caps cannot hold a unit row mass")
    rng = np.random.default_rng(seed)
    w = np.where(live, rng.exponential(size=P.shape), 0.0)
    fixed = np.zeros(P.shape, bool)
    q = np.zeros_like(P)
    for _ in range(P.shape[2] + 1):
        rem = 1.0 - np.where(fixed, caps, 0.0).sum(axis=2, keepdims=True)
        free_w = np.where(fixed, 0.0, w).sum(axis=2, keepdims=True)
        scale = np.divide(rem, free_w, out=np.zeros_like(rem), where=free_w > 0)
        q = np.where(fixed, caps, w * scale)
        over = (q > caps) & ~fixed
        if not over.any():
            break
        fixed |= over
    # unit caps force the nominal row; keep it bit-exact
    q = np.where((kappa == 1.0)[:, :, None], P, q)
    q[~mdp.action_mask] = P[~mdp.action_mask]
    return q


class AdversarialKernel:
    """Worst-case kernel Q = xi* P, chosen at the current augmented state.

    Where the budget is below the level the maximiser carries less than unit
    mass (the dropped part has no future cost); rows are renormalised for
    simulation.
    """

    descriptor = "adversarial"

    def __init__(self, result: SolveResult):
        if result.xi_star is None:
            raise DomainError("result carries no maximiser densities")
        self.result = result

    def rows(self, x, a, xi):
        q = xi * self.result.mdp.prob[x, a]
        return q / q.sum(axis=1, keepdims=True)


def adversarial_kernel(result: SolveResult, mdp: Mdp = None, ygrid=None) -> AdversarialKernel:
    if mdp is not None and mdp is not result.mdp and not mdp == result.mdp:
        raise ValidationError("MDP does not match the solved result")
    return AdversarialKernel(result)


# --------------------------------------------------------------------------
# rollout


def truncation_bound(mdp: Mdp, horizon: int) -> float:
    g = mdp.gamma
    return g**horizon * mdp.c_max() / (1.0 - g)


def cvar_equal_weights(samples, alpha) -> float:
    """CVaR of the uniform empirical distribution on ``samples``."""
    return cvar(empirical_distribution(samples), alpha)


def _cvar_sorted_rows(desc, alpha):
    """Row-wise CVaR for equal-weight samples sorted in descending order."""
    n = desc.shape[1]
    tail = alpha * n
    k = int(math.floor(tail))
    head = desc[:, :k].sum(axis=1)
    if k < n:
        head = head + (tail - k) * desc[:, k]
    return head / tail


def bootstrap_cvar_se(samples, alpha, n_boot=200, seed=0) -> float:
    x = np.asarray(samples, dtype=float)
    rng = np.random.default_rng(seed)
    vals = np.empty(n_boot)
    for b in range(n_boot):
        draw = np.sort(x[rng.integers(0, x.size, x.size)])[::-1]
        vals[b] = _cvar_sorted_rows(draw[None, :], alpha)[0]
    return float(vals.std(ddof=1))


def _run_block(mdp, policy, kernel, start, alpha_start, horizon, n, rng):
    x = np.full(n, start, dtype=np.int64)
    y = np.full(n, float(alpha_start))
    total = np.zeros(n)
    disc = 1.0
    cum_cache = None
    if isinstance(kernel, np.ndarray):
        cum_cache = np.cumsum(kernel, axis=2)
    for _ in range(horizon):
        a, xi = policy.act(x, y)
        total += disc * mdp.cost[x, a]
        disc *= mdp.gamma
        u = rng.random(n)
        if cum_cache is not None:
            cum = cum_cache[x, a]
        else:
            cum = np.cumsum(kernel.rows(x, a, xi), axis=1)
        slot = np.minimum((cum < u[:, None] * cum[:, -1:]).sum(axis=1), cum.shape[1] - 1)
        y = policy.next_level(y, xi, slot)
        x = mdp.succ[x, a, slot]
    return total


def rollout(
    kernel,
    mdp: Mdp,
    policy: SolveResult,
    start: int | None = None,
    alpha_start: float = 1.0,
    horizon: int = 400,
    n_episodes: int = 10_000,
    seed: int = 0,
    alpha: float | None = None,
    descriptor: str | None = None,
    n_boot: int = 200,
) -> RolloutReport:
    """Simulate the augmented-state policy and summarise discounted costs.

    ``kernel`` is an (S, A, m) array aligned with ``mdp.succ`` (nominal or
    sampled) or an :class:`AdversarialKernel`. The empirical CVaR is taken at
    ``alpha`` (default ``alpha_start``).
    """
    if n_episodes < 1:
        raise ValidationError("need at least one episode")
    if horizon < 1:
        raise ValidationError("horizon must be positive")
    start = mdp.start_state if start is None else int(start)
    alpha = float(alpha_start if alpha is None else alpha)
    if isinstance(kernel, np.ndarray):
        if kernel.shape != mdp.prob.shape:
            raise ValidationError(f"kernel shape {kernel.shape} != {mdp.prob.shape}")
        bad = (kernel > 0) & ~(mdp.prob > 0)
        if bad.any():
            raise ValidationError("kernel puts mass outside the nominal support")
    pol = Policy(policy)
    n_blocks = -(-n_episodes // BLOCK)
    seqs = np.random.SeedSequence(seed).spawn(n_blocks)
    parts = []
    for b, ss in enumerate(seqs):
        n = min(BLOCK, n_episodes - b * BLOCK)
        parts.append(_run_block(mdp, pol, kernel, start, alpha_start, horizon, n, np.random.default_rng(ss)))
    samples = np.concatenate(parts)
    if descriptor is None:
        descriptor = getattr(kernel, "descriptor", "kernel")
    se = float(samples.std(ddof=1) / math.sqrt(samples.size)) if samples.size > 1 else 0.0
    return RolloutReport(
        n_episodes=n_episodes,
        horizon=horizon,
        cost_samples=samples,
        empirical_mean=float(samples.mean()),
        empirical_cvar_alpha=cvar_equal_weights(samples, alpha),
        alpha=alpha,
        kernel_descriptor=descriptor,
        seed=int(seed),
        standard_error=se,
        cvar_standard_error=bootstrap_cvar_se(samples, alpha, n_boot, seed) if n_boot else math.nan,
    )
