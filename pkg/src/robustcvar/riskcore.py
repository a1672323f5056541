"""Exact risk measures on finite discrete distributions.

CVaR and NCVaR are computed exactly: both are linear programs over a box of
density ratios with a unit-mass constraint, which a fractional-knapsack sweep
over the outcomes (largest first) solves in O(n log n). EVaR needs a 1-D
convex minimisation over the exponential-moment parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, ValidationError

PROB_ATOL = 1e-12
# probabilities below this are treated as exactly zero
ZERO_PROB = 1e-15


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Finite random variable: ``outcomes[i]`` occurs with ``probs[i]``."""

    outcomes: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        z = np.atleast_1d(np.asarray(self.outcomes, dtype=float))
        p = np.atleast_1d(np.asarray(self.probs, dtype=float))
        if z.ndim != 1 or p.ndim != 1 or z.shape != p.shape:
            raise ValidationError("outcomes and probs must be 1-D lists of equal length")
        if z.size == 0:
            raise ValidationError("distribution needs at least one outcome")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(p))):
            raise ValidationError("outcomes and probs must be finite")
        if np.any(p < 0):
            raise ValidationError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > PROB_ATOL:
            raise ValidationError(f"probabilities sum to {p.sum()!r}, not 1")
        z.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "outcomes", z)
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.outcomes.size

    def mean(self) -> float:
        return float(np.dot(self.outcomes, self.probs))

    def max(self) -> float:
        """Largest outcome with non-zero probability (essential supremum)."""
        return float(self.outcomes[self.probs > ZERO_PROB].max())

    def __eq__(self, other):
        if not isinstance(other, DiscreteDistribution):
            return NotImplemented
        return np.array_equal(self.outcomes, other.outcomes) and np.array_equal(self.probs, other.probs)

    __hash__ = None


def _as_dist(dist) -> DiscreteDistribution:
    if isinstance(dist, DiscreteDistribution):
        return dist
    outcomes, probs = dist
    return DiscreteDistribution(outcomes, probs)


def _check_alpha(alpha):
    alpha = float(alpha)
    if not (0.0 < alpha <= 1.0) or math.isnan(alpha):
        raise DomainError(f"confidence level must lie in (0, 1], got {alpha!r}")
    return alpha


def _check_budget(kappa, n, k_max=None):
    kap = np.asarray(kappa, dtype=float)
    if kap.ndim == 0:
        kap = np.full(n, float(kap))
    if kap.shape != (n,):
        raise ValidationError(f"budget vector has shape {kap.shape}, expected ({n},)")
    if not np.all(np.isfinite(kap)):
        raise ValidationError("budget must be finite")
    if np.any(kap < 1.0):
        raise ValidationError(f"budget must be >= 1 everywhere (min {kap.min()!r})")
    if k_max is not None and np.any(kap > k_max):
        raise ValidationError(f"budget exceeds K_max={k_max!r} (max {kap.max()!r})")
    return kap


def greedy_fill(outcomes, mass_caps, total=1.0):
    """Fractional knapsack: put ``total`` mass on the largest outcomes first.

    ``mass_caps[i]`` bounds the mass placed on outcome ``i``. Ties keep input
    order (stable sort). Returns ``(sum_i mass_i * outcome_i, mass)``; if the
    caps cannot absorb ``total`` the mass vector is simply left short.
    """
    z = np.asarray(outcomes, dtype=float)
    caps = np.asarray(mass_caps, dtype=float)
    order = np.argsort(-z, kind="stable")
    mass = np.zeros_like(z)
    left = float(total)
    for i in order:
        if left <= 0.0:
            break
        take = min(caps[i], left)
        if take <= 0.0:
            continue
        mass[i] = take
        left -= take
    return float(np.dot(mass, z)), mass


def _density(mass, probs):
    out = np.zeros_like(mass)
    nz = probs > ZERO_PROB
    out[nz] = mass[nz] / probs[nz]
    return out


def cvar(dist, alpha) -> float:
    """Conditional value-at-risk of a cost: mean of the upper ``alpha`` tail.

    Mass ``alpha`` is drawn from the largest outcomes downward (fractionally at
    the boundary atom) and averaged.

    >>> cvar(DiscreteDistribution([1, 2, 3, 4], [0.25] * 4), 0.5)
    3.5
    """
    d = _as_dist(dist)
    alpha = _check_alpha(alpha)
    p = np.where(d.probs > ZERO_PROB, d.probs, 0.0)
    tail, _ = greedy_fill(d.outcomes, p, total=alpha)
    return tail / alpha


def cvar_dual(dist, alpha):
    """CVaR through its dual: max E_Q[Z] over densities Q/P in [0, 1/alpha].

    Returns ``(value, density)`` where ``density`` is one maximiser.
    """
    d = _as_dist(dist)
    alpha = _check_alpha(alpha)
    p = np.where(d.probs > ZERO_PROB, d.probs, 0.0)
    value, mass = greedy_fill(d.outcomes, np.minimum(p / alpha, 1.0))
    return value, _density(mass, p)


def ncvar(dist, alpha, kappa, k_max=None):
    """NCVaR: max E_Q[Z] over densities with Q(w)/P(w) in [0, kappa(w)/alpha].

    ``kappa`` is a scalar or one budget per outcome, each in ``[1, k_max]``.
    Returns ``(value, density)``.
    """
    d = _as_dist(dist)
    alpha = _check_alpha(alpha)
    kap = _check_budget(kappa, len(d), k_max)
    p = np.where(d.probs > ZERO_PROB, d.probs, 0.0)
    caps = np.minimum(p * kap / alpha, p.sum())
    if caps.sum() < 1.0 - PROB_ATOL:
        # cannot happen for alpha <= 1 and kappa >= 1; kept for direct callers
        raise ValidationError("NCVaR dual set is empty")
    value, mass = greedy_fill(d.outcomes, caps)
    return value, _density(mass, p)


def _log_mgf(z, logp, t):
    a = t * z + logp
    m = a.max()
    return m + math.log(np.exp(a - m).sum())


def evar(dist, alpha, tol=1e-9, max_iter=10_000) -> float:
    """Entropic value-at-risk: inf over t > 0 of (ln E[exp(tZ)] - ln alpha) / t.

    The objective is unimodal in t, so we bracket it on a log scale starting at
    t = 1e-8 and then run golden-section search in log t.
    """
    d = _as_dist(dist)
    alpha = _check_alpha(alpha)
    keep = d.probs > ZERO_PROB
    z = d.outcomes[keep]
    p = d.probs[keep]
    zmax = float(z.max())
    if alpha == 1.0:
        return float(np.dot(z, p) / p.sum())
    if np.all(z == zmax) or p[z == zmax].sum() >= alpha:
        # the infimum is the t -> inf limit
        return zmax
    logp = np.log(p)
    log_alpha = math.log(alpha)
    # shift by the max so the objective stays O(spread) for large t
    zs = z - zmax

    def f(u):
        t = math.exp(u)
        return (_log_mgf(zs, logp, t) - log_alpha) / t

    lo = math.log(1e-8)
    step = 1.0
    mid = lo + step
    f_lo, f_mid = f(lo), f(mid)
    it = 0
    while f_mid <= f_lo:
        hi = mid + 2.0 * step
        f_hi = f(hi)
        if f_hi > f_mid:
            break
        lo, f_lo, mid, f_mid = mid, f_mid, hi, f_hi
        step *= 2.0
        it += 1
        if it > 200:
            raise NumericError("EVaR bracket search did not terminate")
    else:
        # minimiser at or below t = 1e-8; the objective is flat there at E[Z]
        hi = mid
    # golden section on [lo, hi]
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    e = a + invphi * (b - a)
    fc, fe = f(c), f(e)
    for _ in range(max_iter):
        if b - a < 1e-11 or (abs(fc - fe) < tol * 1e-3 and b - a < 1e-7):
            break
        if fc < fe:
            b, e, fe = e, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + invphi * (b - a)
            fe = f(e)
    else:
        raise NumericError(f"EVaR minimisation did not converge in {max_iter} iterations")
    best = min(fc, fe, f(a), f(b))
    # the objective of the true limit at t -> 0 is E[Z]; never report below it
    return zmax + max(best, float(np.dot(zs, p)))


def rn_reduction(alpha, K) -> float:
    """Confidence level alpha/K of the CVaR problem equivalent to a
    density-ratio ambiguity set with fixed budget K."""
    alpha = _check_alpha(alpha)
    K = float(K)
    if not K >= 1.0 or math.isinf(K):
        raise DomainError(f"budget K must be a finite value >= 1, got {K!r}")
    return alpha / K


def kl_reduction(alpha, kappa) -> float:
    """Confidence level alpha / kappa**(1/alpha) of the EVaR problem equivalent
    to a KL ball of radius ln(kappa)."""
    alpha = _check_alpha(alpha)
    kappa = float(kappa)
    if not kappa >= 1.0 or math.isinf(kappa):
        raise DomainError(f"kappa must be a finite value >= 1, got {kappa!r}")
    # log form avoids overflow of kappa**(1/alpha) for small alpha
    return math.exp(math.log(alpha) - math.log(kappa) / alpha)


def empirical_distribution(samples) -> DiscreteDistribution:
    """Uniform weights 1/n on the samples, duplicate values merged."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValidationError("need at least one sample")
    vals, counts = np.unique(x, return_counts=True)
    probs = counts / x.size
    # guard the 1e-12 sum check against rounding for large n
    probs = probs / probs.sum()
    return DiscreteDistribution(vals, probs)
