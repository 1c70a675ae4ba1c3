"""Intrinsic reward policy optimization.

Each iteration copies the base parameters into K exploratory policies, takes N
gradient-ascent steps on each one's intrinsic reward, and estimates the
extrinsic policy gradient at every final exploratory policy. Those gradients
are pulled back to the base parameters through the chain of update Jacobians
(I + eta * Hessian, applied as curvature-vector products), mixed with softmax
weights of the exploratory returns, and applied with a KL trust-region step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .agent import EXPLORE, FINAL, GridAgent, TrainingError
from .critic import CriticPair, advantages
from .envs import QuadraticObjective, Trajectory
from .numerics import NumericalError, conjugate_gradient
from .policy import GridPolicy, score_weights, state_weights

log = logging.getLogger(__name__)


class SurrogateObjective:
    """sum_{s,a} W[s, a] log pi_theta(a|s) with W held fixed.

    W carries the (normalized) advantages of one batch, so gradients and
    Hessian-vector products both refer to the same sampled trajectories.
    """

    def __init__(self, policy: GridPolicy, weights: np.ndarray):
        self.policy = policy
        self.weights = weights

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.policy.score_gradient(theta, self.weights)

    def hvp(self, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.policy.score_hvp(theta, self.weights, v)


@dataclass
class TapeStep:
    theta: np.ndarray
    objective: Any  # anything with hvp(theta, v)

    def vjp(self, v: np.ndarray, eta: float) -> np.ndarray:
        """(I + eta H)^T v; H is symmetric."""
        return v + eta * self.objective.hvp(self.theta, v)


@dataclass
class UpdateTape:
    eta: float
    steps: list[TapeStep] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)


@dataclass
class ExploratoryRun:
    k: int
    thetas: list[np.ndarray]
    tape: UpdateTape
    performance: float
    final_gradient: np.ndarray
    final_traj: Trajectory | None = None
    final_values: np.ndarray | None = None
    final_advantages: np.ndarray | None = None

    @property
    def final_theta(self) -> np.ndarray:
        return self.thetas[-1]


@dataclass
class IrpoGradient:
    vector: np.ndarray
    weights: np.ndarray
    tau: float


def exploratory_update(theta: np.ndarray, objective, eta: float) -> tuple[np.ndarray, TapeStep]:
    g = objective.gradient(theta)
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite exploratory gradient")
    return theta + eta * g, TapeStep(np.array(theta, copy=True), objective)


def run_exploratory_phase(theta: np.ndarray, intrinsic: Sequence, N: int, eta: float,
                          extrinsic) -> list[ExploratoryRun]:
    """Exact-gradient phase: ``intrinsic`` and ``extrinsic`` expose value/gradient/hvp."""
    if N < 1:
        raise ValueError("N must be >= 1")
    runs = []
    for k, obj in enumerate(intrinsic):
        th = np.array(theta, dtype=float, copy=True)
        thetas, tape = [th], UpdateTape(eta)
        for _ in range(N):
            th, st = exploratory_update(th, obj, eta)
            thetas.append(th)
            tape.steps.append(st)
        runs.append(ExploratoryRun(k, thetas, tape, float(extrinsic.value(th)),
                                   np.asarray(extrinsic.gradient(th), dtype=float)))
    return runs


def backprop_through_updates(run: ExploratoryRun, g: np.ndarray | None = None) -> np.ndarray:
    """Pull an extrinsic gradient at the final exploratory parameters back to the base."""
    v = np.array(run.final_gradient if g is None else g, dtype=float, copy=True)
    if v.shape != run.thetas[0].shape:
        raise ValueError(f"gradient has shape {v.shape}, parameters are {run.thetas[0].shape}")
    for st in reversed(run.tape.steps):
        v = st.vjp(v, run.tape.eta)
    return v


def softmax_weights(performance: Sequence[float], tau: float) -> np.ndarray:
    if not 0 < tau <= 1:
        raise ValueError(f"temperature must be in (0, 1], got {tau}")
    j = np.asarray(performance, dtype=float)
    if not np.all(np.isfinite(j)):
        raise ValueError("performance estimates must be finite")
    z = (j - j.max()) / tau
    w = np.exp(z)
    return w / w.sum()


def irpo_gradient(runs: Sequence[ExploratoryRun], tau: float,
                  grads: Sequence[np.ndarray] | None = None) -> IrpoGradient:
    """Softmax(J / tau)-weighted sum of the backpropagated run gradients."""
    w = softmax_weights([r.performance for r in runs], tau)
    if grads is None:
        grads = [backprop_through_updates(r) for r in runs]
    vec = np.zeros_like(np.asarray(grads[0], dtype=float))
    for wk, gk in zip(w, grads):
        vec = vec + wk * gk
    return IrpoGradient(vec, w, tau)


def anneal_tau(step: float, total_steps: float, floor: float = 0.05, fraction: float = 0.1) -> float:
    """Linear decay from 1 to ``floor`` over the first ``fraction`` of training."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    horizon = fraction * total_steps
    if horizon <= 0 or step >= horizon:
        return floor
    return 1.0 - (1.0 - floor) * step / horizon


@dataclass
class TrustRegionResult:
    theta: np.ndarray
    kl: float
    accepted: bool
    backtracks: int = 0
    fallback: bool = False


def trust_region_step(theta: np.ndarray, g: np.ndarray, delta_kl: float,
                      fvp: Callable[[np.ndarray], np.ndarray],
                      kl: Callable[[np.ndarray], float],
                      cg_iters: int = 10, damping: float = 1e-2,
                      max_backtracks: int = 10, kl_slack: float = 1.2) -> TrustRegionResult:
    """Natural-gradient step scaled to the KL radius, then halved until the measured
    KL is within ``kl_slack * delta_kl``."""
    if delta_kl <= 0:
        raise ValueError("delta_kl must be positive")
    g = np.asarray(g, dtype=float)
    if not np.any(g):
        return TrustRegionResult(theta.copy(), 0.0, True)
    fallback = False
    try:
        d, _ = conjugate_gradient(fvp, g, cg_iters, damping)
        dFd = float(d @ fvp(d))
        if not np.isfinite(dFd) or dFd <= 0:
            raise NumericalError(f"d'Fd = {dFd}")
    except NumericalError as exc:
        log.warning("conjugate gradient failed (%s); using the raw gradient direction", exc)
        fallback = True
        d = g
        dFd = float(d @ fvp(d))
        if not np.isfinite(dFd) or dFd <= 0:
            log.warning("no usable curvature along the gradient; base parameters unchanged")
            return TrustRegionResult(theta.copy(), 0.0, False, 0, True)
    step = np.sqrt(2.0 * delta_kl / dFd) * d
    for n in range(max_backtracks + 1):
        cand = theta + step
        measured = kl(cand)
        if np.isfinite(measured) and measured <= kl_slack * delta_kl:
            return TrustRegionResult(cand, float(measured), True, n, fallback)
        step = 0.5 * step
    log.warning("trust region: no acceptable step after %d backtracks", max_backtracks)
    return TrustRegionResult(theta.copy(), 0.0, False, max_backtracks, fallback)


def policy_trust_region_step(policy: GridPolicy, theta: np.ndarray, g: np.ndarray,
                             delta_kl: float, states: np.ndarray, **kw) -> TrustRegionResult:
    """Trust-region step with the Fisher and KL measured on ``states`` (a state distribution)."""
    fvp = policy.fisher_operator(theta, states)
    return trust_region_step(theta, g, delta_kl, fvp,
                             lambda new: policy.mean_kl(theta, new, states), **kw)


class IrpoAgent(GridAgent):
    name = "irpo"

    def __init__(self, cfg, grid=None, rewards=None):
        super().__init__(cfg, grid, rewards)
        if self.K < 1:
            raise ValueError("IRPO needs at least one intrinsic reward")
        self.critics = [CriticPair(self.new_critic(k, 0), self.new_critic(k, 1)) for k in range(self.K)]
        self._channels = [self.rewards.subset([k]) for k in range(self.K)]
        self.best_theta = self.theta.copy()
        self.last_runs: list[ExploratoryRun] = []
        self.last_gradient: IrpoGradient | None = None

    def iteration_cost(self) -> int:
        c = self.cfg.irpo
        return (self.K * c.N * c.explore_episodes + self.K * c.final_episodes) * self.grid.horizon

    def tau(self) -> float:
        c = self.cfg.irpo
        return anneal_tau(self.counter.used, max(self.cfg.budget.samples, 1), c.tau_floor, c.tau_anneal)

    def _snapshot(self, k=None, j=None) -> dict:
        return {"iteration": self.iteration, "k": k, "j": j, "seed": self.cfg.seed}

    def explore(self, k: int) -> ExploratoryRun:
        c = self.cfg.irpo
        obs = self.grid.obs_table
        pair = self.critics[k]
        th = self.theta.copy()
        thetas, tape = [th], UpdateTape(c.eta)
        for j in range(c.N):
            traj = self.collect(th, c.explore_episodes, self.stream(EXPLORE, k, j), self._channels[k])
            r_int = traj.intrinsic[:, 0]
            try:
                v_int = pair.intrinsic.fit(traj, obs, rewards=r_int)
                pair.extrinsic.fit(traj, obs)
                adv = advantages(traj, v_int, rewards=r_int)
                th, st = exploratory_update(th, SurrogateObjective(self.policy, score_weights(
                    traj, adv, self.grid.n_cells)), c.eta)
            except NumericalError as exc:
                raise TrainingError(str(exc), self._snapshot(k, j)) from exc
            thetas.append(th)
            tape.steps.append(st)
        traj = self.collect(th, c.final_episodes, self.stream(FINAL, k))
        try:
            v_ext = pair.extrinsic.fit(traj, obs)
        except NumericalError as exc:
            raise TrainingError(str(exc), self._snapshot(k, c.N)) from exc
        adv = advantages(traj, v_ext, normalized=c.normalize_extrinsic)
        g = self.policy.score_gradient(th, score_weights(traj, adv, self.grid.n_cells))
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite extrinsic gradient", self._snapshot(k, c.N))
        if c.discounted_performance:
            perf = float(traj.discounted_returns().mean())
        else:
            perf = float(traj.successes().mean())
        return ExploratoryRun(k, thetas, tape, perf, g, traj, v_ext, adv)

    def run_gradients(self, runs: list[ExploratoryRun]) -> list[np.ndarray]:
        return [backprop_through_updates(r) for r in runs]

    def base_direction(self, grad: IrpoGradient, runs: list[ExploratoryRun]) -> tuple[np.ndarray, list]:
        """Final update direction and any extra trajectories for the Fisher estimate."""
        return grad.vector, []

    def step(self) -> None:
        c = self.cfg.irpo
        runs = [self.explore(k) for k in range(self.K)]
        tau = self.tau()
        G = irpo_gradient(runs, tau, self.run_gradients(runs))
        direction, extra = self.base_direction(G, runs)
        if not np.all(np.isfinite(direction)):
            raise TrainingError("non-finite base direction", self._snapshot())
        if c.base_update == "trust_region":
            cells = np.concatenate([r.final_traj.cells for r in runs] + [t.cells for t in extra])
            res = policy_trust_region_step(
                self.policy, self.theta, direction, c.delta_kl, state_weights(cells, self.grid.n_cells),
                cg_iters=c.cg_iters, damping=c.cg_damping, max_backtracks=c.max_backtracks,
                kl_slack=c.kl_slack)
            new = res.theta
            self.record_step(res)
        else:
            new = self.theta + c.base_lr * direction
            cells = np.concatenate([r.final_traj.cells for r in runs])
            self.last_kl = self.policy.mean_kl(self.theta, new, state_weights(cells, self.grid.n_cells))
        self.theta = new
        best = int(np.argmax(G.weights))
        self.best_theta = runs[best].final_theta
        self.last_runs, self.last_gradient = runs, G
        self.last_omega, self.last_tau = G.weights.tolist(), tau
        log.debug("iter %d samples %d tau %.3f omega %s J %s kl %.2e", self.iteration, self.counter.used,
                  tau, np.round(G.weights, 3), [round(r.performance, 3) for r in runs], self.last_kl)

    def eval_params(self) -> np.ndarray:
        return self.best_theta

    def checkpoint(self):
        return {"theta": self.theta, "eval_theta": self.best_theta}


def train(cfg, grid=None, rewards=None):
    """Metrics rows of an IRPO run; see IrpoAgent."""
    return IrpoAgent(cfg, grid, rewards).train()
