"""MLP policies over grid cells.

Observations are a function of the agent cell only, so a policy is evaluated
once on every free cell and rollouts read from the resulting table. Sample
averages of score-function terms collapse onto (cell, action) weights, which
keeps gradients and curvature products independent of the batch size.
"""
from __future__ import annotations

import numpy as np

from .envs import GridSpec, Trajectory, rollout
from .numerics import (CategoricalKLHead, LogSoftmaxHead, MlpSpec, hvp, log_softmax,
                       mlp_forward, value_and_grad)


def rng_stream(*keys: int) -> np.random.Generator:
    """Independent generator for a tuple of non-negative integer keys."""
    return np.random.default_rng([int(k) for k in keys])


class GridPolicy:
    def __init__(self, spec: MlpSpec, obs_table: np.ndarray):
        if spec.output_dim < 1 or spec.input_dim != obs_table.shape[1]:
            raise ValueError("policy network does not match the observation table")
        self.spec = spec
        self.obs = obs_table
        self.n_cells = obs_table.shape[0]
        self.n_actions = spec.output_dim

    @classmethod
    def for_grid(cls, grid: GridSpec, hidden=(64, 64), n_actions: int = 4) -> "GridPolicy":
        return cls(MlpSpec(grid.obs_table.shape[1], tuple(hidden), n_actions), grid.obs_table)

    def init(self, rng: np.random.Generator, scale: float = 0.01) -> np.ndarray:
        return self.spec.init_params(rng, scale)

    def log_probs(self, params: np.ndarray) -> np.ndarray:
        z, _ = mlp_forward(self.spec, params, self.obs)
        return log_softmax(z)

    def probs(self, params: np.ndarray) -> np.ndarray:
        return np.exp(self.log_probs(params))

    def _tape(self, params, rows):
        return mlp_forward(self.spec, params, self.obs[rows])[1]

    def score_gradient(self, params: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Gradient of sum_{s,a} weights[s, a] log pi(a|s)."""
        rows = np.flatnonzero(np.any(weights != 0, axis=1))
        if rows.size == 0:
            return np.zeros_like(params)
        _, g = value_and_grad(self._tape(params, rows), LogSoftmaxHead(weights[rows]))
        return g

    def score_hvp(self, params: np.ndarray, weights: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Hessian of the same weighted log-likelihood, applied to ``v``."""
        rows = np.flatnonzero(np.any(weights != 0, axis=1))
        if rows.size == 0:
            return np.zeros_like(params)
        return hvp(self._tape(params, rows), LogSoftmaxHead(weights[rows]), v)

    def fisher_operator(self, params: np.ndarray, state_weights: np.ndarray):
        """v -> F v, the Hessian of the state-weighted mean KL(pi_params || pi) at pi = pi_params."""
        rows = np.flatnonzero(state_weights > 0)
        tape = self._tape(params, rows)
        ref = np.exp(log_softmax(tape.output))
        head = CategoricalKLHead(ref, state_weights[rows])
        return lambda v: hvp(tape, head, v)

    def mean_kl(self, old: np.ndarray, new: np.ndarray, state_weights: np.ndarray) -> float:
        rows = np.flatnonzero(state_weights > 0)
        lp_old = self.log_probs(old)[rows]
        lp_new = self.log_probs(new)[rows]
        kl = (np.exp(lp_old) * (lp_old - lp_new)).sum(axis=1)
        return float((state_weights[rows] * kl).sum())


def score_weights(traj: Trajectory, adv: np.ndarray, n_cells: int, n_actions: int = 4) -> np.ndarray:
    """(cell, action) weights of the sample mean of adv_t * log pi(a_t|s_t)."""
    w = np.zeros((n_cells, n_actions))
    if len(traj):
        np.add.at(w, (traj.cells, traj.actions), np.asarray(adv, dtype=float) / len(traj))
    return w


def state_weights(cells: np.ndarray, n_cells: int) -> np.ndarray:
    """Empirical state distribution of a batch."""
    if len(cells) == 0:
        return np.zeros(n_cells)
    return np.bincount(cells, minlength=n_cells) / len(cells)


def evaluate(policy: np.ndarray, spec: GridSpec, episodes: int = 1,
             rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Greedy (argmax) evaluation of an action-probability table.

    Returns (mean discounted return, success rate).
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    traj = rollout(spec, policy, None, rng if rng is not None else np.random.default_rng(0),
                   n_episodes=episodes, greedy=True)
    return float(traj.discounted_returns().mean()), float(traj.successes().mean())
