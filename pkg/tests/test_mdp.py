from collections import deque

import numpy as np
import pytest
from conftest import random_mdp, small_grid_spec

from robustcvar import ParseError, ValidationError
from robustcvar.mdp import (
    AmbiguitySpec,
    GridSpec,
    build_gridworld,
    dumps_mdp,
    from_dense,
    load_mdp,
    loads_mdp,
    make_mdp,
    place_obstacles,
    random_budget_field,
    save_mdp,
    validate,
)

TWO_STATE = """{
  "format": "robustcvar-mdp",
  "version": 1,
  "n_states": 2,
  "n_actions": 2,
  "gamma": 0.5,
  "start_state": 0,
  "goal_state": 1,
  "states": [
    [{"a": 0, "cost": 1.0, "next": [[1, 0.25], [0, 0.75]]}, {"a": 1, "cost": 3.0, "next": [[1, 1.0]]}],
    [{"a": 0, "cost": 0.0, "next": [[1, 1.0]]}]
  ]
}
"""


@pytest.fixture(scope="module")
def default_grid():
    return build_gridworld(GridSpec())


def test_default_gridworld_shape(default_grid):
    m = default_grid
    assert m.n_states == 64 * 53 + 1
    assert m.n_actions == 4
    assert m.grid.start == (60, 50) and m.grid.goal == (60, 2)
    assert len(m.grid.obstacles) == 80
    assert m.start_state == 60 * 53 + 50
    assert set(np.unique(m.cost)) == {0.0, 1.0, 40.0}
    assert validate(m) == []


def test_gridworld_rows_stochastic(default_grid):
    sums = default_grid.prob.sum(axis=2)
    np.testing.assert_allclose(sums, 1.0, atol=1e-10)
    assert default_grid.prob.min() >= 0.0 and default_grid.prob.max() <= 1.0


def test_gridworld_transition_probabilities(default_grid):
    m = default_grid
    C = 53
    s = 30 * C + 20  # interior cell
    P = m.dense_kernel()
    for a, (dr, dc) in enumerate([(0, 1), (1, 0), (0, -1), (-1, 0)]):
        target = (30 + dr) * C + 20 + dc
        assert P[s, a, target] == pytest.approx(0.95)
        assert np.count_nonzero(P[s, a]) == 4
        others = [P[s, a, (30 + r) * C + 20 + c] for r, c in [(0, 1), (1, 0), (0, -1), (-1, 0)] if (r, c) != (dr, dc)]
        np.testing.assert_allclose(others, 0.05 / 3)


def test_gridworld_off_grid_stays_put():
    m = build_gridworld(GridSpec(rows=3, cols=3, start=(2, 2), goal=(0, 0), obstacle_count=0))
    corner = 2 * 3 + 2
    P = m.dense_kernel()
    # east and south both leave the grid from the bottom-right corner
    assert P[corner, 0, corner] == pytest.approx(0.95 + 0.05 / 3)
    assert P[corner, 3, corner] == pytest.approx(2 * 0.05 / 3)


def test_collision_cost_charged_from_obstacle_cell():
    spec = GridSpec(rows=3, cols=3, start=(2, 2), goal=(0, 0), obstacles=[(1, 1)])
    m = build_gridworld(spec)
    assert np.all(m.cost[1 * 3 + 1] == 40.0)
    assert np.all(m.cost[2 * 3 + 2] == 1.0)


def test_goal_and_terminal_absorb_at_zero_cost(default_grid):
    m = default_grid
    term = m.n_states - 1
    for s in (m.goal_state, term):
        assert np.all(m.cost[s] == 0.0)
        np.testing.assert_allclose(m.dense_kernel()[s, :, term], 1.0)


def test_one_by_two_grid():
    spec = GridSpec(rows=1, cols=2, start=(0, 1), goal=(0, 0), obstacle_count=0, intended_prob=1.0)
    m = build_gridworld(spec)
    assert m.n_states == 3
    P = m.dense_kernel()
    west = 2
    assert P[1, west, 0] == 1.0
    assert m.cost[1, west] == 1.0


def test_obstacle_placement_properties():
    spec = GridSpec(rows=10, cols=10, start=(9, 9), goal=(0, 0), obstacle_count=98, seed=3)
    obs = place_obstacles(spec, 3)
    assert len(obs) == len(set(obs)) == 98
    assert spec.start not in obs and spec.goal not in obs
    assert place_obstacles(spec, 3) == obs


def test_obstacle_count_exceeding_free_cells():
    with pytest.raises(ValidationError):
        build_gridworld(GridSpec(rows=3, cols=3, start=(0, 0), goal=(2, 2), obstacle_count=8))


@pytest.mark.parametrize(
    "kw",
    [
        dict(start=(0, 0), goal=(0, 0)),
        dict(start=(9, 0)),
        dict(obstacles=[(5, 0)]),
        dict(intended_prob=0.0),
        dict(gamma=1.0),
        dict(obstacle_count=3, seed=None),
    ],
)
def test_gridspec_validation(kw):
    with pytest.raises(ValidationError):
        build_gridworld(small_grid_spec(**kw))


def test_gridspec_dict_round_trip():
    spec = small_grid_spec()
    assert GridSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValidationError):
        GridSpec.from_dict({"rows": 3, "colz": 4})


def test_gridworld_deterministic():
    a = build_gridworld(GridSpec())
    b = build_gridworld(GridSpec())
    assert a == b
    assert dumps_mdp(a) == dumps_mdp(b)
    c = build_gridworld(GridSpec(seed=1))
    assert c.grid.obstacles != a.grid.obstacles


# -- validation ---------------------------------------------------------------


def bfs_reachable(P, src, dst):
    """Independent reachability oracle on the dense kernel."""
    adj = (P > 0).any(axis=1)
    seen, queue = {src}, deque([src])
    while queue:
        x = queue.popleft()
        for y in np.flatnonzero(adj[x]):
            if y not in seen:
                seen.add(int(y))
                queue.append(int(y))
    return dst in seen


def test_validate_row_sum_violation(rng):
    m = random_mdp(rng)
    prob = np.array(m.prob)
    prob[2, 1] *= 0.9
    bad = make_mdp(
        [[list(zip(m.succ[x, a], prob[x, a])) for a in range(2)] for x in range(5)], m.cost, m.gamma, 0
    )
    kinds = [d.kind for d in validate(bad)]
    assert "row_sum" in kinds
    assert [d.where for d in validate(bad) if d.kind == "row_sum"] == [(2, 1)]


def test_validate_negative_probability():
    m = make_mdp([[[(0, 1.2), (1, -0.2)]], [[(1, 1.0)]]], [[1.0], [0.0]], 0.5, 0)
    assert {"negative_prob"} <= {d.kind for d in validate(m)}


def test_validate_unreachable_goal():
    # state 3 is the goal but every transition into it has zero probability
    P = np.zeros((4, 1, 4))
    P[0, 0, 1] = 1.0
    P[1, 0, 2] = 1.0
    P[2, 0, 0] = 1.0
    P[3, 0, 3] = 1.0
    m = from_dense(P, np.ones((4, 1)), 0.9, 0, goal_state=3)
    assert not bfs_reachable(P, 0, 3)
    assert [d.kind for d in validate(m)] == ["unreachable_goal"]


def test_validate_reachability_matches_bfs(rng):
    for _ in range(30):
        m = random_mdp(rng, n_states=8, sparsity=0.85)
        goal = int(rng.integers(8))
        m2 = from_dense(m.dense_kernel(), m.cost, m.gamma, 0, goal_state=goal)
        flagged = any(d.kind == "unreachable_goal" for d in validate(m2))
        assert flagged == (not bfs_reachable(m.dense_kernel(), 0, goal))


def test_validate_cost_bound(rng):
    m = random_mdp(rng, cost_scale=10.0)
    assert validate(m, c_max=100.0) == []
    assert [d.kind for d in validate(m, c_max=0.5)] == ["cost_bound"]


# -- ambiguity ------------------------------------------------------------------


def test_ambiguity_spec(rng):
    m = random_mdp(rng)
    assert np.all(AmbiguitySpec("none").budget(m) == 1.0)
    assert np.all(AmbiguitySpec("rn_fixed", K=2).budget(m) == 2.0)
    field = random_budget_field(m, 2.0, 5)
    assert field.min() >= 1.0 and field.max() <= 2.0
    np.testing.assert_array_equal(field, random_budget_field(m, 2.0, 5))
    amb = AmbiguitySpec("rn_decision_dependent", budget_field=field, K_max=2.0)
    assert amb.y_max() == 2.0
    assert not AmbiguitySpec("kl_fixed", K=2).solvable
    for bad in (
        dict(kind="rn_fixed", K=0.5),
        dict(kind="wasserstein"),
        dict(kind="rn_decision_dependent"),
        dict(kind="rn_decision_dependent", budget_field=np.full((5, 2), 3.0), K_max=2.0),
        dict(kind="rn_decision_dependent", budget_field=np.full((5, 2), 0.5)),
    ):
        with pytest.raises(ValidationError):
            AmbiguitySpec(**bad)


# -- file I/O -----------------------------------------------------------------


def test_round_trip_gridworld(tmp_path, default_grid):
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_mdp(default_grid, p1)
    loaded = load_mdp(p1)
    assert loaded == default_grid
    save_mdp(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_round_trip_full_precision(rng, tmp_path):
    m = random_mdp(rng)
    save_mdp(m, tmp_path / "m.json")
    back = load_mdp(tmp_path / "m.json")
    assert back == m
    np.testing.assert_array_equal(back.prob, m.prob)


def test_hand_written_file():
    m = loads_mdp(TWO_STATE)
    assert m.n_states == 2 and m.gamma == 0.5 and m.goal_state == 1
    assert m.action_mask.tolist() == [[True, True], [True, False]]
    P = m.dense_kernel()
    np.testing.assert_allclose(P[0, 0], [0.75, 0.25])
    np.testing.assert_allclose(P[0, 1], [0.0, 1.0])
    assert m.cost.tolist() == [[1.0, 3.0], [0.0, 0.0]]


def test_truncated_file_is_parse_error():
    text = TWO_STATE[: len(TWO_STATE) // 2]
    with pytest.raises(ParseError) as info:
        loads_mdp(text, "two.json")
    assert info.value.line is not None and info.value.line > 1


@pytest.mark.parametrize(
    "edit",
    [
        lambda t: t.replace('"robustcvar-mdp"', '"other"'),
        lambda t: t.replace('"n_states": 2', '"n_states": 3'),
        lambda t: t.replace('"a": 1', '"a": 7'),
        lambda t: t.replace('"cost": 3.0, ', ""),
    ],
)
def test_malformed_documents(edit):
    with pytest.raises(ParseError):
        loads_mdp(edit(TWO_STATE))


def test_invariant_violation_on_load():
    with pytest.raises(ValidationError):
        loads_mdp(TWO_STATE.replace("[1, 0.25], [0, 0.75]", "[1, 0.25], [0, 0.5]"))
