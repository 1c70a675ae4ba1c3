import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irpo.agent import FINAL
from irpo.algorithm import (ExploratoryRun, IrpoAgent, SurrogateObjective, TapeStep, UpdateTape,
                            anneal_tau, backprop_through_updates, exploratory_update, irpo_gradient,
                            run_exploratory_phase, softmax_weights, trust_region_step)
from irpo.config import RunConfig, apply_overrides
from irpo.critic import advantages
from irpo.envs import QuadraticObjective, corridor, load_layout, rollout
from irpo.policy import GridPolicy, rng_stream, score_weights


def quad_recurrence(theta, c, eta, steps):
    # theta <- theta + eta * (-2 (theta - c)), written out by hand
    th = np.array(theta, dtype=float)
    for _ in range(steps):
        th = th - 2 * eta * (th - np.asarray(c, dtype=float))
    return th


def small_policy(seed=0):
    spec = corridor(4)
    pol = GridPolicy.for_grid(spec, (6,))
    rng = np.random.default_rng(seed)
    theta = pol.init(rng, 1.0)
    return spec, pol, theta, rng


def random_weights(rng, n):
    return rng.normal(size=(n, 4)) * 0.3


# --- exploratory updates


def test_eta_zero_update_is_identity():
    spec, pol, theta, rng = small_policy()
    obj = SurrogateObjective(pol, random_weights(rng, spec.n_cells))
    nxt, step = exploratory_update(theta, obj, 0.0)
    assert np.array_equal(nxt, theta)
    v = rng.normal(size=theta.size)
    assert np.array_equal(step.vjp(v, 0.0), v)


def test_quadratic_update():
    c = (0.0, -2.0)
    th = np.array([1.0, 3.0])
    nxt, _ = exploratory_update(th, QuadraticObjective(c), 0.1)
    assert np.allclose(nxt, (1 - 0.2) * th + 0.2 * np.array(c), atol=1e-15)


def test_zero_advantage_update():
    spec, pol, theta, _ = small_policy()
    nxt, _ = exploratory_update(theta, SurrogateObjective(pol, np.zeros((spec.n_cells, 4))), 0.5)
    assert np.array_equal(nxt, theta)


def test_nonfinite_gradient_raises():
    from irpo.numerics import NumericalError

    class Bad:
        def gradient(self, th):
            return np.full_like(th, np.nan)

    with pytest.raises(NumericalError):
        exploratory_update(np.zeros(2), Bad(), 0.1)


def test_quadratic_phase_landing_point():
    runs = run_exploratory_phase(np.zeros(2), [QuadraticObjective((0, -2))], 5, 0.1, QuadraticObjective((0, 0)))
    (run,) = runs
    assert np.allclose(run.thetas[-1], quad_recurrence((0, 0), (0, -2), 0.1, 5), atol=1e-15)
    assert np.allclose(run.thetas[-1], [0.0, -1.34464], atol=1e-12)
    assert np.array_equal(run.thetas[0], np.zeros(2))
    assert len(run.tape) == 5


def test_degenerate_unroll_phase():
    ext = QuadraticObjective((1.0, 1.0))
    th = np.array([0.3, -0.2])
    (run,) = run_exploratory_phase(th, [QuadraticObjective((0, -2))], 1, 0.0, ext)
    assert np.array_equal(run.thetas[1], th)
    assert np.array_equal(run.final_gradient, ext.gradient(th))


def test_phase_requires_steps():
    with pytest.raises(ValueError):
        run_exploratory_phase(np.zeros(2), [QuadraticObjective((0, 0))], 0, 0.1, QuadraticObjective((0, 0)))


# --- backpropagation through the updates


def test_identity_chain():
    g = np.array([0.5, -1.0])
    (run,) = run_exploratory_phase(np.zeros(2), [QuadraticObjective((0, -2))], 5, 0.0, QuadraticObjective((0, 0)))
    assert np.array_equal(backprop_through_updates(run, g), g)


@pytest.mark.parametrize("eta,N", [(0.1, 5), (0.05, 3), (0.3, 1)])
def test_quadratic_chain_factor(eta, N):
    (run,) = run_exploratory_phase(np.array([0.7, 0.1]), [QuadraticObjective((2, 2))], N, eta,
                                   QuadraticObjective((0, 0)))
    g = run.final_gradient
    assert np.max(np.abs(backprop_through_updates(run) - (1 - 2 * eta) ** N * g)) <= 1e-12


def test_chain_matches_finite_differences_of_composed_map():
    spec, pol, theta, rng = small_policy(3)
    n = spec.n_cells
    W_int, W_ext = random_weights(rng, n), random_weights(rng, n)
    eta = 0.5
    intr = SurrogateObjective(pol, W_int)

    def J_ext(th):
        return float((W_ext * pol.log_probs(th)).sum())

    def composed(th):
        return J_ext(th + eta * intr.gradient(th))

    nxt, st_ = exploratory_update(theta, intr, eta)
    run = ExploratoryRun(0, [theta, nxt], UpdateTape(eta, [st_]), 0.0, pol.score_gradient(nxt, W_ext))
    pulled = backprop_through_updates(run)
    eps = 1e-5
    worst = 0.0
    for _ in range(50):
        d = rng.normal(size=theta.size)
        fd = (composed(theta + eps * d) - composed(theta - eps * d)) / (2 * eps)
        worst = max(worst, abs(pulled @ d - fd) / max(abs(fd), 1e-8))
    assert worst <= 1e-3


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(-10, 10), seed=st.integers(0, 1000))
def test_backprop_linear(alpha, seed):
    spec, pol, theta, rng = small_policy(seed)
    th, steps = theta, []
    for _ in range(3):
        th, s = exploratory_update(th, SurrogateObjective(pol, random_weights(rng, spec.n_cells)), 0.2)
        steps.append(s)
    run = ExploratoryRun(0, [theta, th], UpdateTape(0.2, steps), 0.0, rng.normal(size=theta.size))
    a = backprop_through_updates(run, alpha * run.final_gradient)
    b = alpha * backprop_through_updates(run)
    assert np.linalg.norm(a - b) <= 1e-12 * max(np.linalg.norm(b), 1e-300) + 1e-300


def test_tape_length_mismatch():
    run = ExploratoryRun(0, [np.zeros(2)], UpdateTape(0.1, []), 0.0, np.zeros(2))
    with pytest.raises(ValueError):
        backprop_through_updates(run, np.zeros(3))


# --- weights and temperature


def test_single_run_weight():
    (run,) = run_exploratory_phase(np.zeros(2), [QuadraticObjective((0, -2))], 2, 0.1, QuadraticObjective((0, 0)))
    G = irpo_gradient([run], 0.5)
    assert np.array_equal(G.weights, [1.0])
    assert np.array_equal(G.vector, backprop_through_updates(run))


def test_two_run_weights():
    w = softmax_weights([1.0, 0.0], 1.0)
    e = math.exp(1.0)
    assert np.allclose(w, [e / (1 + e), 1 / (1 + e)], atol=1e-15)
    assert np.allclose(w, [0.73106, 0.26894], atol=1e-5)


def test_equal_performance_uniform():
    assert np.allclose(softmax_weights([0.3] * 5, 0.05), 0.2)


def test_softmax_no_overflow():
    w = softmax_weights([1e6, 0.0, -1e6], 0.05)
    assert np.all(np.isfinite(w)) and w[0] == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=8), st.floats(0.05, 1.0))
def test_weight_simplex(perf, tau):
    w = softmax_weights(perf, tau)
    assert abs(w.sum() - 1) <= 1e-12
    assert np.all(w > 0) or len(perf) == 1 or np.ptp(perf) / tau > 700


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=6, unique=True),
       st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_sharpening_monotone(perf, t1, t2):
    hi, lo = max(t1, t2), min(t1, t2)
    q = int(np.argmax(perf))
    assert softmax_weights(perf, lo)[q] >= softmax_weights(perf, hi)[q] - 1e-12
    gap = sorted(perf)[-1] - sorted(perf)[-2]
    if gap > 10 * 0.05 and len(perf) <= 6:
        # at the floor, a gap of more than ten temperatures leaves at most 5 e^-10 elsewhere
        assert softmax_weights(perf, 0.05)[q] >= 0.99


def test_bad_temperature():
    with pytest.raises(ValueError):
        softmax_weights([0.0], 0.0)


@pytest.mark.parametrize("step,expected", [(0, 1.0), (50, 0.525), (100, 0.05), (1000, 0.05)])
def test_anneal(step, expected):
    assert anneal_tau(step, 1000) == pytest.approx(expected)


def test_anneal_requires_positive_total():
    with pytest.raises(ValueError):
        anneal_tau(0, 0)


# --- trust region


def half_sq_kl(theta):
    return lambda new: 0.5 * float((new - theta) @ (new - theta))


def test_zero_gradient_no_step():
    th = np.array([1.0, 2.0])
    res = trust_region_step(th, np.zeros(2), 1e-3, lambda v: v, half_sq_kl(th))
    assert np.array_equal(res.theta, th)


def test_identity_fisher_step_length():
    th = np.zeros(5)
    g = np.zeros(5)
    g[0] = 1.0
    res = trust_region_step(th, g, 1e-3, lambda v: v, half_sq_kl(th), damping=0.0)
    assert np.linalg.norm(res.theta - th) == pytest.approx(math.sqrt(0.002), rel=1e-12)
    assert res.theta[0] > 0 and res.accepted and res.backtracks == 0


def test_identical_policies_zero_kl():
    spec, pol, theta, _ = small_policy()
    assert pol.mean_kl(theta, theta, np.full(spec.n_cells, 1 / spec.n_cells)) == 0.0


def test_backtracking_halves_until_within_slack():
    th = np.zeros(2)
    g = np.array([1.0, 0.0])
    # true KL is 16x the quadratic model, so two halvings are needed
    res = trust_region_step(th, g, 1e-3, lambda v: v, lambda n: 8.0 * float(n @ n), damping=0.0)
    assert res.accepted and res.backtracks == 2
    assert res.kl <= 1.2e-3


def test_all_backtracks_fail_keeps_theta():
    th = np.ones(2)
    res = trust_region_step(th, np.ones(2), 1e-3, lambda v: v, lambda n: 1.0, max_backtracks=3)
    assert not res.accepted and np.array_equal(res.theta, th)


def test_cg_failure_falls_back_to_gradient_direction():
    th = np.zeros(2)
    g = np.array([1.0, 0.0])
    calls = []

    def fvp(v):
        calls.append(1)
        # indefinite inside CG (first call), positive along g afterwards
        return -v if len(calls) == 1 else v

    res = trust_region_step(th, g, 1e-3, fvp, half_sq_kl(th), damping=0.0)
    assert res.fallback and res.accepted
    assert res.theta[1] == 0.0 and res.theta[0] > 0


# --- agent-level properties


def small_cfg(*extra):
    cfg = RunConfig()
    return apply_overrides(cfg, ["irpo.explore_episodes=2", "irpo.final_episodes=2", *extra])


def test_runs_start_at_base_and_are_distinct_on_fourrooms():
    agent = IrpoAgent(small_cfg())
    runs = [agent.explore(k) for k in range(agent.K)]
    assert agent.K == 4
    for r in runs:
        assert np.array_equal(r.thetas[0], agent.theta)
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.linalg.norm(runs[i].final_theta - runs[j].final_theta) > 0


def test_degenerate_unroll_gradient_is_plain_gradient():
    agent = IrpoAgent(small_cfg("irpo.K=1", "irpo.N=1", "irpo.eta=0.0"))
    theta = agent.theta.copy()
    agent.step()
    (run,) = agent.last_runs
    # independent recomputation on the shared-seed final rollouts
    traj = rollout(agent.grid, agent.policy.probs(theta), None,
                   rng_stream(agent.cfg.seed, 0, FINAL, 0), agent.cfg.irpo.final_episodes)
    assert np.array_equal(traj.cells, run.final_traj.cells)
    assert np.array_equal(traj.actions, run.final_traj.actions)
    adv = advantages(traj, run.final_values, normalized=agent.cfg.irpo.normalize_extrinsic)
    plain = agent.policy.score_gradient(theta, score_weights(traj, adv, agent.grid.n_cells))
    assert np.array_equal(agent.last_gradient.vector, plain)


def test_short_training_respects_kl_and_budget():
    cfg = small_cfg("budget.samples=30000")
    agent = IrpoAgent(cfg)
    rows = list(agent.train())
    assert rows and rows[-1].samples_used <= 30000
    assert all(kl <= cfg.irpo.kl_slack * cfg.irpo.delta_kl for kl in agent.accepted_kls)
    for r in rows:
        assert abs(sum(r.omega) - 1) < 1e-12 and min(r.omega) > 0


def test_budget_below_one_iteration():
    agent = IrpoAgent(small_cfg("budget.samples=10"))
    assert list(agent.train()) == []
    assert agent.counter.used == 0


def test_shared_seed_reproducible():
    a = [r.as_csv()[:7] for r in IrpoAgent(small_cfg("budget.samples=12000")).train()]
    b = [r.as_csv()[:7] for r in IrpoAgent(small_cfg("budget.samples=12000")).train()]
    assert a == b and a
