"""Shared scaffolding for training agents on grid environments.

An agent owns its policy parameters, a sample counter and a seed. ``train``
runs iterations while the worst-case cost of the next iteration still fits in
the sample budget, so the budget is never exceeded.
"""
from __future__ import annotations

import logging
import time
from typing import Iterator

import numpy as np

from .config import RunConfig
from .critic import Critic
from .envs import GridSpec, SampleCounter, Trajectory, default_num_rewards, load_grid, load_layout, rollout
from .intrinsic import IntrinsicRewardSet, build_rewards
from .metrics import MetricsRow
from .numerics import MlpSpec
from .policy import GridPolicy, evaluate, rng_stream

log = logging.getLogger(__name__)

# rng stream purposes
INIT, CRITIC_INIT, EXPLORE, FINAL, BASE, EVAL, PRETRAIN = range(7)


class TrainingError(RuntimeError):
    """Aborted training; ``snapshot`` says where."""

    def __init__(self, message: str, snapshot: dict):
        self.snapshot = snapshot
        super().__init__(f"{message} (snapshot: {snapshot})")


def make_grid(cfg: RunConfig) -> GridSpec:
    env = cfg.env
    if env.map:
        with open(env.map) as fh:
            text = fh.read()
        return load_grid(text, env.horizon or 100, env.gamma if env.gamma is not None else 0.99,
                         name=env.name)
    return load_layout(env.name, env.horizon, env.gamma)


def num_rewards(cfg: RunConfig) -> int:
    if cfg.irpo.K is not None:
        return cfg.irpo.K
    try:
        return default_num_rewards(cfg.env.name)
    except KeyError:
        return 4


class GridAgent:
    name = "agent"

    def __init__(self, cfg: RunConfig, grid: GridSpec | None = None,
                 rewards: IntrinsicRewardSet | None = None):
        self.cfg = cfg
        self.grid = grid if grid is not None else make_grid(cfg)
        self.K = num_rewards(cfg) if rewards is None else rewards.K
        self.rewards = rewards if rewards is not None else build_rewards(
            self.grid, cfg.intrinsic.kind, self.K, cfg.intrinsic.seed)
        self.policy = GridPolicy.for_grid(self.grid, cfg.actor.hidden)
        self.theta = self.policy.init(rng_stream(cfg.seed, INIT), cfg.actor.init_scale)
        self.critic_spec = MlpSpec(self.grid.obs_table.shape[1], tuple(cfg.critic.hidden), 1)
        self.counter = SampleCounter()
        self.iteration = 0
        self.last_kl = 0.0
        self.last_omega: list[float] = []
        self.last_tau = float("nan")
        self.accepted_kls: list[float] = []
        self.rejected_steps = 0

    # -- helpers

    def stream(self, *keys: int) -> np.random.Generator:
        return rng_stream(self.cfg.seed, self.iteration, *keys)

    def new_critic(self, *keys: int) -> Critic:
        c = self.cfg.critic
        rng = rng_stream(self.cfg.seed, CRITIC_INIT, *keys)
        return Critic(self.critic_spec, self.critic_spec.init_params(rng, 0.01),
                      lr=c.lr, epochs=c.epochs, lam=c.lam, optimizer=c.optimizer)

    def collect(self, params: np.ndarray, episodes: int, rng: np.random.Generator,
                rewards: IntrinsicRewardSet | None = None) -> Trajectory:
        return rollout(self.grid, self.policy.probs(params), rewards, rng, episodes, self.counter)

    def record_step(self, result) -> None:
        """Bookkeeping for one trust-region result."""
        self.last_kl = result.kl
        if result.accepted:
            self.accepted_kls.append(result.kl)
        else:
            self.rejected_steps += 1

    # -- to override

    def iteration_cost(self) -> int:
        raise NotImplementedError

    def step(self) -> None:
        raise NotImplementedError

    def eval_params(self) -> np.ndarray:
        return self.theta

    def eval_table(self) -> np.ndarray:
        return self.policy.probs(self.eval_params())

    def checkpoint(self) -> dict[str, np.ndarray]:
        return {"theta": self.theta, "eval_theta": self.eval_params()}

    # -- loop

    def evaluate_now(self) -> tuple[float, float]:
        return evaluate(self.eval_table(), self.grid, self.cfg.eval.episodes,
                        rng_stream(self.cfg.seed, self.iteration, EVAL))

    def train(self) -> Iterator[MetricsRow]:
        budget = self.cfg.budget.samples
        interval = self.cfg.eval.interval
        t0 = time.perf_counter()
        next_eval = 0
        ret, succ = 0.0, 0.0
        while self.counter.used + self.iteration_cost() <= budget:
            self.step()
            self.iteration += 1
            if interval <= 0 or self.counter.used >= next_eval:
                ret, succ = self.evaluate_now()
                next_eval = self.counter.used + interval
            yield MetricsRow(self.counter.used, self.iteration, ret, succ, self.last_kl,
                             list(self.last_omega), self.last_tau, time.perf_counter() - t0)
        log.info("%s: stopped after %d iterations, %d/%d samples", self.name, self.iteration,
                 self.counter.used, budget)
