"""Run directories, checkpoints, replay evaluation and the quadratic testbed."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import GridAgent
from .algorithm import anneal_tau, backprop_through_updates, irpo_gradient, run_exploratory_phase
from .baselines import HrlAgent, OptionPolicy, make_agent
from .config import RunConfig, load_config
from .envs import QuadraticObjective
from .metrics import MetricsWriter

log = logging.getLogger(__name__)

CONFIG_NAME = "config.yaml"
METRICS_NAME = "metrics.csv"
POLICY_NAME = "policy.npz"

# intrinsic centers of the two-dimensional testbed; the extrinsic optimum is the origin
QUADRATIC_CENTERS = ((0.0, -2.0), (-2.0, 2.0), (2.0, 2.0), (-2.0, -2.0))
TRAJECTORY_HEADER = ["iter", "entity", "k", "j", "x", "y", "value"]


class Checkpointer:
    """Saves every ``every`` iterations and keeps the newest ``keep`` files."""

    def __init__(self, directory: str | Path, every: int = 10, keep: int = 3):
        self.dir = Path(directory)
        self.every, self.keep = every, keep
        self.saved: list[Path] = []

    def maybe_save(self, agent: GridAgent) -> Path | None:
        if self.every <= 0 or agent.iteration % self.every:
            return None
        path = self.dir / f"checkpoint_{agent.iteration:06d}.npz"
        save_state(agent, path)
        self.saved.append(path)
        while len(self.saved) > self.keep:
            self.saved.pop(0).unlink(missing_ok=True)
        return path


def save_state(agent: GridAgent, path: str | Path) -> None:
    arrays = dict(agent.checkpoint())
    arrays["iteration"] = np.array(agent.iteration)
    arrays["samples_used"] = np.array(agent.counter.used)
    np.savez(path, **arrays)


def load_state(agent: GridAgent, path: str | Path) -> GridAgent:
    """Restores parameters written by ``save_state`` into a freshly built agent."""
    with np.load(path) as z:
        data = {k: z[k] for k in z.files}
    agent.theta = data["theta"]
    agent.iteration = int(data["iteration"])
    agent.counter.used = int(data["samples_used"])
    if hasattr(agent, "best_theta"):
        agent.best_theta = data["eval_theta"]
    if isinstance(agent, HrlAgent):
        subs = [data[f"subpolicy_{k}"] for k in range(agent.K)]
        tables = [agent.policy.probs(p) for p in subs] + [np.full((agent.grid.n_cells, 4), 0.25)]
        b = agent.cfg.baseline
        agent.sub_params = subs
        agent.options = OptionPolicy(np.stack(tables), agent.rewards.potentials[:agent.K],
                                     b.option_horizon, b.option_patience)
    return agent


@dataclass
class RunSummary:
    output: Path
    iterations: int
    samples_used: int
    final_success: float
    final_return: float


def run_training(cfg: RunConfig, output: str | Path, checkpoint_every: int = 10,
                 keep: int = 3) -> RunSummary:
    """Trains ``cfg.agent`` to budget, writing config echo, metrics, checkpoints and the final policy."""
    cfg.validate()
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(cfg.dump())
    agent = make_agent(cfg)
    ckpt = Checkpointer(out, checkpoint_every, keep)
    last = None
    with MetricsWriter(out / METRICS_NAME) as writer:
        for row in agent.train():
            writer.write(row)
            ckpt.maybe_save(agent)
            last = row
    save_state(agent, out / POLICY_NAME)
    budget = cfg.budget.samples
    if agent.counter.used > budget:
        log.warning("sample budget overshot by %d", agent.counter.used - budget)
    return RunSummary(out, agent.iteration, agent.counter.used,
                      last.eval_success_rate if last else 0.0, last.eval_mean_return if last else 0.0)


def evaluate_run(run_dir: str | Path, episodes: int | None = None) -> tuple[float, float]:
    """Greedy evaluation of a saved run's final policy with its echoed config."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / CONFIG_NAME)
    if episodes is not None:
        cfg.eval.episodes = episodes
        cfg.validate()
    agent = load_state(make_agent(cfg), run_dir / POLICY_NAME)
    return agent.evaluate_now()


# ---------------------------------------------------------------------------
# quadratic testbed


@dataclass
class AnalyticResult:
    rows: list[tuple] = field(default_factory=list)
    theta: np.ndarray | None = None
    omegas: list[np.ndarray] = field(default_factory=list)
    last_runs: list = field(default_factory=list)

    @property
    def selected(self) -> int:
        return int(np.argmax(self.omegas[-1]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(TRAJECTORY_HEADER)
        for it, entity, k, j, x, y, v in self.rows:
            w.writerow([it, entity, k, j, f"{x:.12g}", f"{y:.12g}", f"{v:.12g}"])
        return buf.getvalue()


def quadratic_objectives(K: int, centers=None) -> tuple[QuadraticObjective, list[QuadraticObjective]]:
    centers = QUADRATIC_CENTERS[:K] if centers is None else centers
    if len(centers) != K:
        raise ValueError(f"need {K} intrinsic centers, have {len(centers)}")
    return QuadraticObjective((0.0, 0.0)), [QuadraticObjective(c) for c in centers]


def analytic_run(extrinsic: QuadraticObjective, intrinsic: list[QuadraticObjective], N: int = 5,
                 eta: float = 0.1, iterations: int = 200, theta0=(0.0, 0.0), base_lr: float = 1.0,
                 tau: float | None = None, tau_floor: float = 0.05,
                 tau_fraction: float = 0.1) -> AnalyticResult:
    """Exact-gradient IRPO with plain gradient ascent on the base parameters.

    ``tau=None`` anneals the temperature over ``iterations``; a number holds it fixed.
    Rows hold the base point (k = -1, j = 0) and every exploratory point
    (j = 1..N+1) per iteration, with the extrinsic value at that point.
    """
    theta = np.array(theta0, dtype=float)
    res = AnalyticResult()
    for it in range(iterations):
        runs = run_exploratory_phase(theta, intrinsic, N, eta, extrinsic)
        t = tau if tau is not None else anneal_tau(it, iterations, tau_floor, tau_fraction)
        G = irpo_gradient(runs, t, [backprop_through_updates(r) for r in runs])
        res.rows.append((it, "base", -1, 0, theta[0], theta[1], extrinsic.value(theta)))
        for r in runs:
            for j, th in enumerate(r.thetas, start=1):
                res.rows.append((it, "exploratory", r.k, j, th[0], th[1], extrinsic.value(th)))
        res.omegas.append(G.weights)
        res.last_runs = runs
        theta = theta + base_lr * G.vector
    res.theta = theta
    return res

