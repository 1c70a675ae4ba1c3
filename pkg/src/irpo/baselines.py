"""Comparison agents sharing the policy, critic and trust-region code.

- ``VanillaAgent``: on-policy actor-critic with a KL trust-region step.
- ``RewardSumAgent``: the same learner on extrinsic + scaled mean intrinsic reward.
- ``IsIrpoAgent``: IRPO with importance-weighted gradients instead of the
  backpropagated ones.
- ``HrlAgent``: subpolicies pretrained on intrinsic rewards, plus a random walk,
  used as options by a high-level policy.
- ``BlendedIrpoAgent``: mixes the IRPO direction with the base policy's own
  gradient once the base policy first sees reward.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .agent import BASE, EVAL, INIT, PRETRAIN, GridAgent, TrainingError
from .algorithm import ExploratoryRun, IrpoAgent, IrpoGradient, policy_trust_region_step
from .critic import Critic, advantages
from .envs import GridSpec, SampleCounter, Trajectory
from .numerics import MlpSpec, NumericalError
from .policy import GridPolicy, rng_stream, score_weights, state_weights

log = logging.getLogger(__name__)

RATIO_CLIP = 1e6


# ---------------------------------------------------------------------------
# plain actor-critic


def actor_critic_update(agent: GridAgent, policy: GridPolicy, theta: np.ndarray, critic: Critic,
                        traj: Trajectory, rewards: np.ndarray | None, delta_kl: float,
                        gamma=None):
    """Critic refit, TD-residual advantages, and one trust-region step."""
    c = agent.cfg.irpo
    values = critic.fit(traj, policy.obs, rewards=rewards, gamma=gamma)
    adv = advantages(traj, values, rewards=rewards, gamma=gamma)
    W = score_weights(traj, adv, policy.n_cells, policy.n_actions)
    g = policy.score_gradient(theta, W)
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite policy gradient")
    return policy_trust_region_step(policy, theta, g, delta_kl, state_weights(traj.cells, policy.n_cells),
                                    cg_iters=c.cg_iters, damping=c.cg_damping,
                                    max_backtracks=c.max_backtracks, kl_slack=c.kl_slack)


class VanillaAgent(GridAgent):
    name = "vanilla"

    def __init__(self, cfg, grid=None, rewards=None,
                 reward_fn: Callable[[Trajectory], np.ndarray] | None = None):
        super().__init__(cfg, grid, rewards)
        self.critic = self.new_critic(0, 1)
        self.reward_fn = reward_fn

    def iteration_cost(self) -> int:
        return self.cfg.baseline.episodes * self.grid.horizon

    def collect_batch(self) -> Trajectory:
        return self.collect(self.theta, self.cfg.baseline.episodes, self.stream(BASE))

    def training_rewards(self, traj: Trajectory) -> np.ndarray | None:
        return None if self.reward_fn is None else self.reward_fn(traj)

    def step(self) -> None:
        traj = self.collect_batch()
        try:
            res = actor_critic_update(self, self.policy, self.theta, self.critic, traj,
                                      self.training_rewards(traj), self.cfg.baseline.delta_kl)
        except NumericalError as exc:
            raise TrainingError(str(exc), {"iteration": self.iteration, "seed": self.cfg.seed}) from exc
        self.record_step(res)
        self.theta = res.theta


class RewardSumAgent(VanillaAgent):
    """Vanilla learner on r + bonus_scale * mean_k r_k."""

    name = "reward-sum"

    def __init__(self, cfg, grid=None, rewards=None, bonus_scale: float | None = None):
        super().__init__(cfg, grid, rewards)
        self.bonus_scale = cfg.baseline.bonus_scale if bonus_scale is None else float(bonus_scale)
        if self.bonus_scale < 0:
            raise ValueError("bonus_scale must be >= 0")

    def collect_batch(self) -> Trajectory:
        return self.collect(self.theta, self.cfg.baseline.episodes, self.stream(BASE), self.rewards)

    def training_rewards(self, traj: Trajectory) -> np.ndarray:
        if traj.intrinsic.shape[1] == 0:
            return traj.rewards
        return traj.rewards + self.bonus_scale * traj.intrinsic.mean(axis=1)


# ---------------------------------------------------------------------------
# importance-sampled IRPO


def is_gradient(policy: GridPolicy, theta: np.ndarray, run: ExploratoryRun,
                clip: float = RATIO_CLIP, clipped: list | None = None) -> np.ndarray:
    """Importance-weighted extrinsic gradient at the base parameters.

    Uses the exploratory run's final rollouts and advantages (from its own
    extrinsic critic) with ratios pi_theta / pi_explore; ratios above ``clip``
    are clipped and counted into ``clipped`` when given.
    """
    traj = run.final_traj
    if traj is None or run.final_advantages is None:
        raise ValueError("run carries no final rollouts")
    lp_base = policy.log_probs(theta)[traj.cells, traj.actions]
    lp_expl = policy.log_probs(run.final_theta)[traj.cells, traj.actions]
    rho = np.exp(lp_base - lp_expl)
    over = int(np.sum(rho > clip))
    if over:
        log.info("importance ratio clipped on %d of %d transitions", over, len(rho))
        rho = np.minimum(rho, clip)
    if clipped is not None:
        clipped.append(over)
    W = score_weights(traj, rho * run.final_advantages, policy.n_cells, policy.n_actions)
    return policy.score_gradient(theta, W)


class IsIrpoAgent(IrpoAgent):
    name = "is-irpo"

    def __init__(self, cfg, grid=None, rewards=None):
        super().__init__(cfg, grid, rewards)
        self.clipped: list[int] = []

    def run_gradients(self, runs):
        return [is_gradient(self.policy, self.theta, r, clipped=self.clipped) for r in runs]


# ---------------------------------------------------------------------------
# options


@dataclass
class OptionPolicy:
    """K learned subpolicies plus a uniform random walk (the last option)."""

    subpolicies: np.ndarray  # (K + 1, n_cells, 4) action probabilities
    potentials: np.ndarray  # (K, n_cells) intrinsic potentials of the learned options
    horizon: int = 10
    patience: int = 3

    @property
    def n_options(self) -> int:
        return self.subpolicies.shape[0]


@dataclass
class OptionBatch:
    traj: Trajectory  # one transition per option execution
    discounts: np.ndarray  # gamma ** duration per option execution
    durations: np.ndarray
    returns: np.ndarray  # discounted extrinsic return per episode
    successes: np.ndarray
    primitive_steps: int


def option_rollout(spec: GridSpec, options: OptionPolicy, high: np.ndarray,
                   rng: np.random.Generator, n_episodes: int = 1,
                   counter: SampleCounter | None = None, greedy: bool = False) -> OptionBatch:
    """Episodes where a high-level table ``high`` (n_cells, n_options) picks options.

    An option ends after ``options.horizon`` steps, at the goal, at the episode
    horizon, or (learned options only) once its potential has failed to rise
    for ``options.patience`` consecutive steps. With ``greedy`` the high-level
    choice and the learned subpolicies act by argmax; the random walk still samples.
    """
    n_opt = options.n_options
    K = n_opt - 1
    if high.shape != (spec.n_cells, n_opt):
        raise ValueError(f"high-level table must have shape ({spec.n_cells}, {n_opt})")
    E, H, gamma = int(n_episodes), spec.horizon, spec.gamma
    high_cum = np.cumsum(high, axis=1)
    high_logp = np.log(np.maximum(high, 1e-300))
    sub_cum = np.cumsum(options.subpolicies, axis=2)
    pos = np.full(E, spec.start_id)
    alive = np.ones(E, dtype=bool)
    opt = np.full(E, -1)
    dur = np.zeros(E, dtype=int)
    streak = np.zeros(E, dtype=int)
    acc = np.zeros(E)
    origin = np.zeros(E, dtype=int)
    ret = np.zeros(E)
    success = np.zeros(E, dtype=bool)
    records = []  # (episode, t_start, origin, option, reward, next, goal, trunc, duration)
    t_start = np.zeros(E, dtype=int)
    steps = 0
    for t in range(H):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        need = idx[opt[idx] < 0]
        if need.size:
            c = pos[need]
            if greedy:
                o = high[c].argmax(axis=1)
            else:
                o = np.minimum((high_cum[c] < rng.random(need.size)[:, None]).sum(axis=1), n_opt - 1)
            opt[need], origin[need], t_start[need] = o, c, t
            dur[need], streak[need], acc[need] = 0, 0, 0.0
        c, o = pos[idx], opt[idx]
        a = np.minimum((sub_cum[o, c] < rng.random(idx.size)[:, None]).sum(axis=1), 3)
        if greedy:
            learned = o < K
            a[learned] = options.subpolicies[o[learned], c[learned]].argmax(axis=1)
        nxt = spec.next_cell[c, a]
        goal = nxt == spec.goal_id
        trunc = ~goal & (t + 1 >= H)
        steps += idx.size
        acc[idx] += goal * gamma ** dur[idx]
        ret[idx] += goal * gamma ** t
        success[idx] |= goal
        dur[idx] += 1
        learned = o < K
        rise = np.zeros(idx.size, dtype=bool)
        if K:
            oo = np.minimum(o, K - 1)
            rise = options.potentials[oo, nxt] - options.potentials[oo, c] > 0
        streak[idx] = np.where(learned & ~rise, streak[idx] + 1, 0)
        pos[idx] = nxt
        end = goal | trunc | (dur[idx] >= options.horizon) | (learned & (streak[idx] >= options.patience))
        for j in np.flatnonzero(end):
            e = idx[j]
            records.append((e, t_start[e], origin[e], opt[e], acc[e], nxt[j], goal[j], trunc[j], dur[e]))
        opt[idx[end]] = -1
        alive[idx[goal | trunc]] = False
    if counter is not None:
        counter.add(steps)
    records.sort(key=lambda r: (r[0], r[1]))
    cols = list(zip(*records)) if records else [()] * 9
    ep = np.array(cols[0], dtype=int)
    cells = np.array(cols[2], dtype=int)
    acts = np.array(cols[3], dtype=int)
    durations = np.array(cols[8], dtype=int)
    traj = Trajectory(cells, acts, np.array(cols[4], dtype=float), np.zeros((len(cells), 0)),
                      high_logp[cells, acts], np.array(cols[5], dtype=int),
                      np.array(cols[6], dtype=bool), np.array(cols[7], dtype=bool), ep, gamma)
    return OptionBatch(traj, gamma ** durations.astype(float), durations, ret, success, steps)


class HrlAgent(GridAgent):
    """Options pretrained on intrinsic rewards, then a high-level policy over them."""

    name = "hrl"

    def __init__(self, cfg, grid=None, rewards=None):
        super().__init__(cfg, grid, rewards)
        b = cfg.baseline
        self.high = GridPolicy(MlpSpec(self.grid.obs_table.shape[1], tuple(cfg.actor.hidden), self.K + 1),
                               self.grid.obs_table)
        self.theta = self.high.init(rng_stream(cfg.seed, INIT, 1), cfg.actor.init_scale)
        self.critic = self.new_critic(0, 1)
        self.sub_params: list[np.ndarray] = []
        self.options: OptionPolicy | None = None
        self.pretrain_used = 0
        self.max_duration = 0
        if b.option_horizon < 1:
            raise ValueError("option_horizon must be >= 1")

    def iteration_cost(self) -> int:
        cost = self.cfg.baseline.episodes * self.grid.horizon
        if self.options is None:
            cost += self.K * self.cfg.baseline.pretrain_samples
        return cost

    def pretrain(self) -> None:
        """Trains one subpolicy per intrinsic channel within its sample allowance."""
        b = self.cfg.baseline
        per_iter = b.episodes * self.grid.horizon
        tables = []
        for k in range(self.K):
            channel = self.rewards.subset([k])
            theta = self.policy.init(rng_stream(self.cfg.seed, PRETRAIN, k), self.cfg.actor.init_scale)
            critic = self.new_critic(2, k)
            used, it = 0, 0
            while used + per_iter <= b.pretrain_samples:
                traj = self.collect(theta, b.episodes, rng_stream(self.cfg.seed, PRETRAIN, k, it), channel)
                used += len(traj)
                res = actor_critic_update(self, self.policy, theta, critic, traj, traj.intrinsic[:, 0],
                                          b.delta_kl)
                theta = res.theta
                it += 1
            self.pretrain_used += used
            self.sub_params.append(theta)
            tables.append(self.policy.probs(theta))
        tables.append(np.full((self.grid.n_cells, 4), 0.25))
        self.options = OptionPolicy(np.stack(tables), self.rewards.potentials[:self.K],
                                    b.option_horizon, b.option_patience)
        log.info("hrl: pretrained %d options with %d samples", self.K, self.pretrain_used)

    def step(self) -> None:
        if self.options is None:
            self.pretrain()
        b = self.cfg.baseline
        batch = option_rollout(self.grid, self.options, self.high.probs(self.theta), self.stream(BASE),
                               b.episodes, self.counter)
        self.max_duration = max(self.max_duration, int(batch.durations.max(initial=0)))
        try:
            res = actor_critic_update(self, self.high, self.theta, self.critic, batch.traj, None,
                                      b.delta_kl, gamma=batch.discounts)
        except NumericalError as exc:
            raise TrainingError(str(exc), {"iteration": self.iteration, "seed": self.cfg.seed}) from exc
        self.record_step(res)
        self.theta = res.theta

    def evaluate_now(self) -> tuple[float, float]:
        if self.options is None:
            return 0.0, 0.0
        batch = option_rollout(self.grid, self.options, self.high.probs(self.theta),
                               rng_stream(self.cfg.seed, self.iteration, EVAL),
                               self.cfg.eval.episodes, greedy=True)
        return float(batch.returns.mean()), float(batch.successes.mean())

    def checkpoint(self):
        out = {"theta": self.theta, "eval_theta": self.theta}
        for k, p in enumerate(self.sub_params):
            out[f"subpolicy_{k}"] = p
        return out


# ---------------------------------------------------------------------------
# gradient blending


@dataclass
class BlendSchedule:
    """beta(t): 0 before the trigger iteration, then rising toward 1.

    ``constant`` overrides the mode with a fixed beta from the start.
    """

    mode: str = "abrupt"
    steps: int = 20
    constant: float | None = None

    MODES = ("abrupt", "exponential", "linear")

    def __post_init__(self):
        if self.constant is None and self.mode not in self.MODES:
            raise ValueError(f"unknown blend mode {self.mode!r}")
        if self.constant is not None and not 0.0 <= self.constant <= 1.0:
            raise ValueError("constant beta must lie in [0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def beta(self, iteration: int, trigger: int | None) -> float:
        if self.constant is not None:
            return float(self.constant)
        if trigger is None or iteration < trigger:
            return 0.0
        dt = iteration - trigger
        if self.mode == "abrupt":
            return 1.0
        if self.mode == "linear":
            return min(1.0, (dt + 1) / self.steps)
        # time constant steps / 5, so beta > 0.99 after ``steps`` iterations
        return 1.0 - math.exp(-5.0 * (dt + 1) / self.steps)


class BlendedIrpoAgent(IrpoAgent):
    name = "blend"

    def __init__(self, cfg, grid=None, rewards=None, schedule: BlendSchedule | None = None):
        super().__init__(cfg, grid, rewards)
        if schedule is None:
            mode = cfg.agent.split("-", 1)[1] if cfg.agent.startswith("blend-") else "abrupt"
            schedule = BlendSchedule(mode, cfg.baseline.blend_steps)
        self.schedule = schedule
        self.trigger: int | None = None
        self.base_critic = self.new_critic(1, 1)
        self.last_beta = 0.0

    @property
    def uses_base_rollouts(self) -> bool:
        return self.schedule.constant != 0.0

    def iteration_cost(self) -> int:
        extra = self.cfg.baseline.blend_episodes * self.grid.horizon if self.uses_base_rollouts else 0
        return super().iteration_cost() + extra

    def base_direction(self, grad: IrpoGradient, runs):
        if not self.uses_base_rollouts:
            self.last_beta = 0.0
            return grad.vector, []
        traj = self.collect(self.theta, self.cfg.baseline.blend_episodes, self.stream(BASE))
        values = self.base_critic.fit(traj, self.grid.obs_table)
        adv = advantages(traj, values, normalized=self.cfg.irpo.normalize_extrinsic)
        g_true = self.policy.score_gradient(self.theta, score_weights(traj, adv, self.grid.n_cells))
        if self.trigger is None and traj.rewards.sum() > 0:
            self.trigger = self.iteration
            log.info("blend: first base-policy reward at iteration %d", self.iteration)
        beta = self.schedule.beta(self.iteration, self.trigger)
        self.last_beta = beta
        return (1.0 - beta) * grad.vector + beta * g_true, [traj]


AGENT_CLASSES = {
    "irpo": IrpoAgent,
    "vanilla": VanillaAgent,
    "is-irpo": IsIrpoAgent,
    "reward-sum": RewardSumAgent,
    "hrl": HrlAgent,
    "blend-abrupt": BlendedIrpoAgent,
    "blend-exponential": BlendedIrpoAgent,
    "blend-linear": BlendedIrpoAgent,
}


def make_agent(cfg, grid=None, rewards=None) -> GridAgent:
    try:
        cls = AGENT_CLASSES[cfg.agent]
    except KeyError:
        raise ValueError(f"unknown agent {cfg.agent!r}; choose from {sorted(AGENT_CLASSES)}") from None
    return cls(cfg, grid, rewards)


def vanilla_pg_train(cfg, grid=None, rewards=None):
    return VanillaAgent(cfg, grid, rewards).train()


def reward_sum_train(cfg, bonus_scale: float | None = None, grid=None, rewards=None):
    return RewardSumAgent(cfg, grid, rewards, bonus_scale).train()


def hrl_train(cfg, grid=None, rewards=None):
    return HrlAgent(cfg, grid, rewards).train()


def blended_train(cfg, schedule: BlendSchedule, grid=None, rewards=None):
    return BlendedIrpoAgent(cfg, grid, rewards, schedule).train()
