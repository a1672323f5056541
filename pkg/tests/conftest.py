import numpy as np
import pytest

from robustcvar.mdp import GridSpec, from_dense
from robustcvar.riskcore import DiscreteDistribution


def random_dist(rng, n_max=12, spread=10.0):
    n = int(rng.integers(1, n_max + 1))
    z = rng.normal(0.0, spread, n)
    if rng.random() < 0.3:
        z = np.round(z)  # repeated outcomes exercise tie handling
    p = rng.dirichlet(np.ones(n))
    return DiscreteDistribution(z, p)


def random_mdp(rng, n_states=5, n_actions=2, gamma=0.9, sparsity=0.5, cost_scale=10.0):
    """Random dense MDP with non-negative costs and partial support per row."""
    P = rng.random((n_states, n_actions, n_states))
    P[rng.random(P.shape) < sparsity] = 0.0
    for x in range(n_states):
        for a in range(n_actions):
            if P[x, a].sum() == 0.0:
                P[x, a, rng.integers(n_states)] = 1.0
    P /= P.sum(axis=2, keepdims=True)
    cost = rng.uniform(0.0, cost_scale, (n_states, n_actions))
    return from_dense(P, cost, gamma, 0)


def small_grid_spec(**kw):
    base = dict(rows=6, cols=7, start=(5, 6), goal=(5, 0), obstacle_count=5, seed=1)
    base.update(kw)
    return GridSpec(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
