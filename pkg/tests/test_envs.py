import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irpo.envs import (DOWN, LEFT, RIGHT, UP, GridError, QuadraticObjective, SampleCounter,
                       corridor, exact_policy_gradient, load_grid, load_layout, quad_eval, reset,
                       rollout, step)


def uniform(spec):
    return np.full((spec.n_cells, 4), 0.25)


def deterministic(spec, action):
    p = np.zeros((spec.n_cells, 4))
    p[:, action] = 1.0
    return p


# --- parsing


def test_open_map_is_valid():
    spec = load_grid("S..\n...\n..G")
    assert spec.start == (0, 0) and spec.goal == (2, 2)
    assert spec.n_cells == 9


def test_enclosed_goal_is_unreachable():
    with pytest.raises(GridError, match="unreachable"):
        load_grid("S....\n...#.\n..#G#\n...#.")


def test_all_problems_reported():
    with pytest.raises(GridError) as exc:
        load_grid("S.x\n..\nSS")
    text = str(exc.value)
    assert "ragged" in text and "unknown character" in text and "duplicate S" in text and "missing G" in text


def test_fourrooms_free_cells():
    spec = load_layout("fourrooms")
    assert spec.walls.shape == (13, 13)
    assert spec.n_cells == 104  # counted from the shipped file below
    text = spec.render()
    assert sum(ch in ".SG" for ch in text) == 104


@pytest.mark.parametrize("name,horizon", [("fourrooms", 100), ("maze-v1", 300), ("maze-v2", 300)])
def test_shipped_layouts(name, horizon):
    spec = load_layout(name)
    assert spec.horizon == horizon and spec.gamma == 0.99
    assert len(spec.components()) == 1


def test_render_roundtrip():
    spec = load_layout("maze-v1")
    again = load_grid(spec.render(), spec.horizon, spec.gamma)
    assert np.array_equal(again.walls, spec.walls) and again.goal == spec.goal


# --- dynamics


def test_step_into_goal():
    spec = load_grid("S.G")
    s = reset(spec)
    s, r, done = step(spec, s, RIGHT)
    assert (r, done) == (0.0, False)
    s, r, done = step(spec, s, RIGHT)
    assert (r, done) == (1.0, True) and s.agent == (2, 0)


def test_step_into_wall_stays():
    spec = load_grid("S#G\n...")
    s, r, done = step(spec, reset(spec), RIGHT)
    assert s.agent == (0, 0) and r == 0.0 and not done
    s, _, _ = step(spec, s, UP)
    assert s.agent == (0, 0)


def test_horizon_truncation():
    spec = load_grid("S..G", horizon=2)
    s, _, _ = step(spec, reset(spec), LEFT)
    s, r, done = step(spec, s, RIGHT)
    assert r == 0.0 and done
    with pytest.raises(RuntimeError):
        step(spec, s, RIGHT)


def test_reward_sparsity_of_layouts():
    for name in ("fourrooms", "maze-v1", "maze-v2"):
        spec = load_layout(name)
        entering = sum(
            1 for c in range(spec.n_cells) for a in range(4)
            if c != spec.goal_id and spec.next_cell[c, a] == spec.goal_id)
        R = spec.reward_table
        assert set(np.unique(R)) <= {0.0, 1.0}
        assert int((R[np.arange(spec.n_cells) != spec.goal_id] > 0).sum()) == entering


# --- rollouts


def test_deterministic_walk_to_goal():
    spec = corridor(5)
    traj = rollout(spec, deterministic(spec, RIGHT), rng=np.random.default_rng(0))
    assert len(traj) == 4
    assert traj.rewards[-1] == 1.0 and traj.rewards[:-1].sum() == 0
    assert traj.discounted_returns()[0] == pytest.approx(0.99**3)


def test_empty_intrinsic_vectors():
    spec = corridor(4)
    traj = rollout(spec, uniform(spec), None, np.random.default_rng(0), 3)
    assert traj.intrinsic.shape == (len(traj), 0)


def test_counter_and_horizon_and_walls():
    spec = load_layout("fourrooms")
    counter = SampleCounter()
    traj = rollout(spec, uniform(spec), None, np.random.default_rng(1), 20, counter)
    assert counter.used == len(traj)
    for s, t in traj.episode_bounds():
        assert t - s <= spec.horizon
    free = set(range(spec.n_cells))
    assert set(traj.cells) <= free and set(traj.next_cells) <= free


def test_rollout_matches_scalar_step():
    spec = load_layout("fourrooms", horizon=30)
    rng = np.random.default_rng(3)
    policy = rng.dirichlet(np.ones(4), spec.n_cells)
    traj = rollout(spec, policy, None, np.random.default_rng(7), 1)
    s = reset(spec)
    for t in range(len(traj)):
        assert spec.cell_id(s.agent) == traj.cells[t]
        s, r, done = step(spec, s, int(traj.actions[t]))
        assert r == traj.rewards[t] and spec.cell_id(s.agent) == traj.next_cells[t]
    assert done


def test_uniform_policy_rarely_solves_maze_v2():
    spec = load_layout("maze-v2")
    traj = rollout(spec, uniform(spec), None, np.random.default_rng(12345), 1000)
    assert traj.successes().mean() < 0.05


def test_episode_major_order():
    spec = corridor(6)
    traj = rollout(spec, uniform(spec), None, np.random.default_rng(2), 5)
    assert np.all(np.diff(traj.episode) >= 0)
    assert traj.n_episodes == 5


# --- exact tabular quantities


def brute_force(spec, logits):
    """Value and goal-reach probability by recursion over (time, cell)."""
    z = logits - logits.max(axis=1, keepdims=True)
    pi = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    H, g = spec.horizon, spec.gamma
    memo = {}

    def V(t, c):
        if t == H:
            return 0.0, 0.0
        if (t, c) not in memo:
            v = reach = 0.0
            for a in range(4):
                n = spec.next_cell[c, a]
                if n == spec.goal_id:
                    v += pi[c, a]
                    reach += pi[c, a]
                else:
                    vn, rn = V(t + 1, n)
                    v += pi[c, a] * g * vn
                    reach += pi[c, a] * rn
            memo[t, c] = (v, reach)
        return memo[t, c]

    return V(0, spec.start_id)


@pytest.mark.parametrize("L", [3, 5])
def test_exact_value_and_reach_against_recursion(L):
    spec = corridor(L, horizon=12)
    logits = np.random.default_rng(L).normal(size=(spec.n_cells, 4))
    ex = exact_policy_gradient(spec, logits)
    v, reach = brute_force(spec, logits)
    assert ex.value == pytest.approx(v, abs=1e-12)
    assert ex.reach_probability == pytest.approx(reach, abs=1e-12)


def test_exact_gradient_against_finite_differences():
    spec = corridor(4, horizon=10)
    logits = np.random.default_rng(0).normal(size=(spec.n_cells, 4))
    ex = exact_policy_gradient(spec, logits)
    eps = 1e-6
    fd = np.zeros_like(logits)
    for i in range(logits.shape[0]):
        for a in range(4):
            e = np.zeros_like(logits)
            e[i, a] = eps
            fd[i, a] = (brute_force(spec, logits + e)[0] - brute_force(spec, logits - e)[0]) / (2 * eps)
    assert np.max(np.abs(ex.gradient - fd)) <= 1e-8


# --- quadratic testbed


def test_quad_examples():
    v, g = quad_eval(QuadraticObjective((0, 0)), np.zeros(2))
    assert v == 0 and np.array_equal(g, [0, 0])
    v, g = quad_eval(QuadraticObjective((0, -2)), np.zeros(2))
    assert v == -4 and np.array_equal(g, [0, -4])
    v, g = quad_eval(QuadraticObjective((2, 2)), np.ones(2))
    assert v == -2 and np.array_equal(g, [2, 2])


def test_quad_dimension_mismatch():
    with pytest.raises(ValueError):
        quad_eval(QuadraticObjective((0, 0)), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_quad_gradient_finite_differences(xs):
    obj = QuadraticObjective(tuple(xs[:2]))
    th = np.array(xs[2:])
    eps = 1e-5
    fd = np.array([(obj.value(th + e) - obj.value(th - e)) / (2 * eps) for e in np.eye(2) * eps])
    assert np.allclose(obj.gradient(th), fd, atol=1e-9)
    assert np.array_equal(obj.hvp(th, np.array([1.0, -3.0])), [-2.0, 6.0])
