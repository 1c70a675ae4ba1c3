"""State-value critics: lambda-return targets, MSE updates, TD-residual advantages."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import Trajectory
from .numerics import MlpSpec, NumericalError, SquaredErrorHead, mlp_forward, value_and_grad


def lambda_returns(rewards: np.ndarray, values: np.ndarray, last_value: float,
                   gamma: float | np.ndarray, lam: float) -> np.ndarray:
    """Backward lambda-return recursion over one episode.

    ``values[t]`` is V(s_t) for t < T and ``last_value`` is the bootstrap at s_T
    (0 after reaching the goal). ``gamma`` may be per step, which is how
    option-level transitions pass gamma**duration.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    rewards = np.asarray(rewards, dtype=float)
    T = len(rewards)
    gam = np.broadcast_to(np.asarray(gamma, dtype=float), (T,))
    if np.any(gam < 0) or np.any(gam > 1):
        raise ValueError("discount must lie in [0, 1]")
    out = np.empty(T)
    nxt_target = float(last_value)
    nxt_value = float(last_value)
    for t in range(T - 1, -1, -1):
        nxt_target = rewards[t] + gam[t] * ((1.0 - lam) * nxt_value + lam * nxt_target)
        out[t] = nxt_target
        nxt_value = values[t]
    return out


def trajectory_lambda_returns(traj: Trajectory, value_table: np.ndarray, lam: float,
                              rewards: np.ndarray | None = None,
                              gamma: float | np.ndarray | None = None) -> np.ndarray:
    """lambda-returns for every transition of a batch, bootstrapping 0 at the goal
    and V(s_T) at horizon truncation. ``gamma`` may be per transition."""
    rewards = traj.rewards if rewards is None else np.asarray(rewards, dtype=float)
    gamma = traj.gamma if gamma is None else gamma
    gam = np.broadcast_to(np.asarray(gamma, dtype=float), (len(traj),))
    v = value_table[traj.cells]
    out = np.empty(len(traj))
    for s, t in traj.episode_bounds():
        last = 0.0 if traj.terminal[t - 1] else float(value_table[traj.next_cells[t - 1]])
        out[s:t] = lambda_returns(rewards[s:t], v[s:t], last, gam[s:t], lam)
    return out


def td_residuals(traj: Trajectory, value_table: np.ndarray, rewards: np.ndarray | None = None,
                 gamma: float | np.ndarray | None = None) -> np.ndarray:
    rewards = traj.rewards if rewards is None else np.asarray(rewards, dtype=float)
    gamma = traj.gamma if gamma is None else gamma
    nxt = np.where(traj.terminal, 0.0, value_table[traj.next_cells])
    return rewards + gamma * nxt - value_table[traj.cells]


def normalize(adv: np.ndarray) -> np.ndarray:
    if len(adv) == 0:
        return adv
    centered = adv - adv.mean()
    return centered / (adv.std() + 1e-8)


def advantages(traj: Trajectory, value_table: np.ndarray, rewards: np.ndarray | None = None,
               gamma: float | np.ndarray | None = None, normalized: bool = True) -> np.ndarray:
    """TD-residual advantages r + gamma V(s') - V(s), optionally standardized per batch."""
    adv = td_residuals(traj, value_table, rewards, gamma)
    return normalize(adv) if normalized else adv


def critic_update(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray, targets: np.ndarray,
                  lr: float, weights: np.ndarray | None = None) -> np.ndarray:
    """One plain gradient step on the (weighted) mean squared error."""
    if lr <= 0:
        raise ValueError("critic learning rate must be positive")
    loss, g = critic_loss_and_grad(spec, params, inputs, targets, weights)
    return params - lr * g


def critic_loss_and_grad(spec, params, inputs, targets, weights=None):
    _, tape = mlp_forward(spec, params, inputs)
    loss, g = value_and_grad(tape, SquaredErrorHead(targets, weights))
    if not np.isfinite(loss) or not np.all(np.isfinite(g)):
        raise NumericalError(
            f"non-finite critic loss {loss} (|params|={np.linalg.norm(params):.3g}, "
            f"targets in [{np.min(targets):.3g}, {np.max(targets):.3g}])")
    return loss, g


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def aggregate_targets(cells: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Collapse repeated cells: (unique cells, mean target, weight = count / n).

    The weighted MSE over unique cells has the same gradient as the plain MSE
    over all transitions.
    """
    uniq, inv, counts = np.unique(cells, return_inverse=True, return_counts=True)
    sums = np.bincount(inv, weights=targets, minlength=len(uniq))
    return uniq, sums / counts, counts / len(cells)


@dataclass
class Critic:
    """A value network over grid cells, trained with Adam on lambda-return targets."""

    spec: MlpSpec
    params: np.ndarray
    lr: float = 1e-3
    epochs: int = 3
    lam: float = 0.95
    optimizer: str = "adam"
    _adam: Adam | None = field(default=None, repr=False)

    def values(self, obs_table: np.ndarray) -> np.ndarray:
        out, _ = mlp_forward(self.spec, self.params, obs_table)
        return out[:, 0]

    def fit(self, traj: Trajectory, obs_table: np.ndarray, rewards: np.ndarray | None = None,
            gamma: float | np.ndarray | None = None) -> np.ndarray:
        """Refit on one batch; returns the value table after the update."""
        if len(traj) == 0:
            return self.values(obs_table)
        table = self.values(obs_table)
        targets = trajectory_lambda_returns(traj, table, self.lam, rewards, gamma)
        cells, y, w = aggregate_targets(traj.cells, targets)
        x = obs_table[cells]
        for _ in range(self.epochs):
            if self.optimizer == "sgd":
                self.params = critic_update(self.spec, self.params, x, y, self.lr, w)
            else:
                if self._adam is None:
                    self._adam = Adam(self.lr)
                _, g = critic_loss_and_grad(self.spec, self.params, x, y, w)
                self.params = self._adam.step(self.params, g)
        return self.values(obs_table)


@dataclass
class CriticPair:
    intrinsic: Critic
    extrinsic: Critic

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator, **kw) -> "CriticPair":
        return cls(Critic(spec, spec.init_params(rng, 0.01), **kw),
                   Critic(spec, spec.init_params(rng, 0.01), **kw))
