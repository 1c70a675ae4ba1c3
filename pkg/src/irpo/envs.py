"""Sparse-reward gridworlds and the quadratic testbed.

Grid cells are addressed as (x, y) with y growing downwards. Every free cell
gets a dense index; policies and intrinsic rewards are tables over that index.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np

LEFT, UP, RIGHT, DOWN = range(4)
ACTIONS = ("left", "up", "right", "down")
_MOVES = ((-1, 0), (0, -1), (1, 0), (0, 1))

# name -> (map file, horizon, gamma, number of intrinsic rewards)
LAYOUTS = {
    "maze-v1": ("maze_v1.txt", 300, 0.99, 6),
    "maze-v2": ("maze_v2.txt", 300, 0.99, 6),
    "fourrooms": ("fourrooms.txt", 100, 0.99, 4),
}


class GridError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid grid: " + "; ".join(self.problems))


@dataclass(frozen=True, eq=False)
class GridSpec:
    walls: np.ndarray  # bool, shape (height, width)
    start: tuple[int, int]
    goal: tuple[int, int]
    horizon: int
    gamma: float
    name: str = "grid"

    @property
    def height(self) -> int:
        return self.walls.shape[0]

    @property
    def width(self) -> int:
        return self.walls.shape[1]

    @cached_property
    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(~self.walls)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    @cached_property
    def index(self) -> np.ndarray:
        """index[y, x] = dense cell id, -1 on walls."""
        idx = np.full(self.walls.shape, -1, dtype=int)
        for i, (x, y) in enumerate(self.free_cells):
            idx[y, x] = i
        return idx

    @property
    def n_cells(self) -> int:
        return len(self.free_cells)

    def cell_id(self, cell: tuple[int, int]) -> int:
        return int(self.index[cell[1], cell[0]])

    @property
    def start_id(self) -> int:
        return self.cell_id(self.start)

    @property
    def goal_id(self) -> int:
        return self.cell_id(self.goal)

    def is_free(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and not self.walls[y, x]

    @cached_property
    def next_cell(self) -> np.ndarray:
        """Deterministic transition table, shape (n_cells, 4)."""
        nxt = np.empty((self.n_cells, 4), dtype=int)
        for i, (x, y) in enumerate(self.free_cells):
            for a, (dx, dy) in enumerate(_MOVES):
                nx, ny = x + dx, y + dy
                nxt[i, a] = self.index[ny, nx] if self.is_free(nx, ny) else i
        return nxt

    @cached_property
    def obs_table(self) -> np.ndarray:
        """Normalized (agent x, agent y, goal x, goal y) for every free cell."""
        sx = max(self.width - 1, 1)
        sy = max(self.height - 1, 1)
        cells = np.array(self.free_cells, dtype=float)
        goal = np.array(self.goal, dtype=float)
        obs = np.empty((self.n_cells, 4))
        obs[:, 0] = cells[:, 0] / sx
        obs[:, 1] = cells[:, 1] / sy
        obs[:, 2] = goal[0] / sx
        obs[:, 3] = goal[1] / sy
        return obs

    def observation(self, cell: tuple[int, int]) -> np.ndarray:
        return self.obs_table[self.cell_id(cell)]

    @cached_property
    def reward_table(self) -> np.ndarray:
        """R(s, a): 1 when the move enters the goal cell."""
        r = (self.next_cell == self.goal_id).astype(float)
        r[self.goal_id] = 0.0
        return r

    def adjacency(self) -> np.ndarray:
        """4-connected adjacency matrix of the free cells."""
        n = self.n_cells
        adj = np.zeros((n, n))
        for i in range(n):
            for j in self.next_cell[i]:
                if j != i:
                    adj[i, j] = 1.0
        return adj

    def components(self) -> list[list[tuple[int, int]]]:
        seen = np.zeros(self.n_cells, dtype=bool)
        comps = []
        for root in range(self.n_cells):
            if seen[root]:
                continue
            seen[root] = True
            queue, comp = deque([root]), []
            while queue:
                i = queue.popleft()
                comp.append(self.free_cells[i])
                for j in self.next_cell[i]:
                    if not seen[j]:
                        seen[j] = True
                        queue.append(j)
            comps.append(comp)
        return comps

    def render(self) -> str:
        rows = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                if (x, y) == self.start:
                    row.append("S")
                elif (x, y) == self.goal:
                    row.append("G")
                else:
                    row.append("#" if self.walls[y, x] else ".")
            rows.append("".join(row))
        return "\n".join(rows) + "\n"


def load_grid(map_text: str, horizon: int = 100, gamma: float = 0.99, name: str = "grid") -> GridSpec:
    """Parse an ASCII map ('#' wall, '.' free, 'S' start, 'G' goal)."""
    problems = []
    rows = [r for r in map_text.splitlines() if r != ""]
    if not rows:
        raise GridError(["empty map"])
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        problems.append(f"ragged rows (lengths {sorted(widths)})")
    width = max(widths)
    walls = np.ones((len(rows), width), dtype=bool)
    starts, goals = [], []
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == "#":
                continue
            if ch not in ".SG":
                problems.append(f"unknown character {ch!r} at ({x}, {y})")
                continue
            walls[y, x] = False
            if ch == "S":
                starts.append((x, y))
            elif ch == "G":
                goals.append((x, y))
    for what, found in (("S", starts), ("G", goals)):
        if not found:
            problems.append(f"missing {what}")
        elif len(found) > 1:
            problems.append(f"duplicate {what} at {found}")
    if int(horizon) < 1:
        problems.append(f"horizon must be >= 1, got {horizon}")
    if not 0.0 <= float(gamma) < 1.0:
        problems.append(f"gamma must lie in [0, 1), got {gamma}")
    if problems:
        raise GridError(problems)
    spec = GridSpec(walls, starts[0], goals[0], int(horizon), float(gamma), name)
    reach = next(c for c in spec.components() if spec.start in c)
    if spec.goal not in reach:
        raise GridError([f"goal {spec.goal} is unreachable from start {spec.start}"])
    return spec


def load_layout(name: str, horizon: int | None = None, gamma: float | None = None) -> GridSpec:
    """One of the shipped layouts, with its default horizon and discount."""
    key = name.lower()
    if key not in LAYOUTS:
        raise KeyError(f"unknown layout {name!r}; choose from {sorted(LAYOUTS)}")
    fname, h, g, _ = LAYOUTS[key]
    text = resources.files("irpo").joinpath("maps").joinpath(fname).read_text()
    return load_grid(text, horizon if horizon is not None else h,
                     gamma if gamma is not None else g, name=key)


def default_num_rewards(name: str) -> int:
    return LAYOUTS[name.lower()][3]


def corridor(length: int, horizon: int = 50, gamma: float = 0.99) -> GridSpec:
    """1 x length corridor, start at the left end, goal at the right end."""
    return load_grid("S" + "." * (length - 2) + "G", horizon, gamma, name=f"corridor-{length}")


# ---------------------------------------------------------------------------
# single-step dynamics


@dataclass(frozen=True)
class GridState:
    agent: tuple[int, int]
    goal: tuple[int, int]
    t: int = 0
    done: bool = False


def reset(spec: GridSpec) -> GridState:
    return GridState(spec.start, spec.goal, 0)


def step(spec: GridSpec, state: GridState, action: int) -> tuple[GridState, float, bool]:
    if state.done or state.t >= spec.horizon:
        raise RuntimeError("step called on a finished episode")
    if action not in range(4):
        raise ValueError(f"action must be in 0..3, got {action}")
    dx, dy = _MOVES[action]
    x, y = state.agent[0] + dx, state.agent[1] + dy
    agent = (x, y) if spec.is_free(x, y) else state.agent
    reward = 1.0 if agent == spec.goal else 0.0
    t = state.t + 1
    terminal = reward > 0 or t >= spec.horizon
    return GridState(agent, state.goal, t, terminal), reward, terminal


# ---------------------------------------------------------------------------
# batched rollouts


@dataclass
class Trajectory:
    """Transitions of one or more episodes, stored episode after episode."""

    cells: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    intrinsic: np.ndarray  # (n, K)
    log_probs: np.ndarray
    next_cells: np.ndarray
    terminal: np.ndarray  # goal reached on this transition
    truncated: np.ndarray  # horizon hit on this transition without reaching the goal
    episode: np.ndarray
    gamma: float = 0.99

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def n_episodes(self) -> int:
        return int(self.episode[-1]) + 1 if len(self.episode) else 0

    def episode_bounds(self) -> list[tuple[int, int]]:
        ends = np.flatnonzero(self.terminal | self.truncated) + 1
        starts = np.concatenate([[0], ends[:-1]])
        return list(zip(starts.tolist(), ends.tolist()))

    def discounted_returns(self) -> np.ndarray:
        """Discounted extrinsic return of each episode from its first state."""
        out = np.zeros(self.n_episodes)
        for e, (s, t) in enumerate(self.episode_bounds()):
            out[e] = (self.rewards[s:t] * self.gamma ** np.arange(t - s)).sum()
        return out

    def successes(self) -> np.ndarray:
        return np.array([bool(self.terminal[t - 1]) for _, t in self.episode_bounds()])

    def with_rewards(self, rewards: np.ndarray) -> "Trajectory":
        return Trajectory(self.cells, self.actions, np.asarray(rewards, dtype=float), self.intrinsic,
                          self.log_probs, self.next_cells, self.terminal, self.truncated,
                          self.episode, self.gamma)


class SampleCounter:
    """Running total of environment transitions."""

    def __init__(self, used: int = 0):
        self.used = int(used)

    def add(self, n: int) -> None:
        self.used += int(n)


def rollout(spec: GridSpec, policy: np.ndarray, intrinsic=None, rng: np.random.Generator | None = None,
            n_episodes: int = 1, counter: SampleCounter | None = None,
            greedy: bool = False) -> Trajectory:
    """Run episodes from the start cell under a tabular stochastic policy.

    ``policy`` holds action probabilities per free cell, shape (n_cells, 4).
    ``intrinsic`` is anything with ``K`` and ``transition(cells, next_cells)``.
    """
    probs = np.asarray(policy, dtype=float)
    if probs.shape != (spec.n_cells, 4):
        raise ValueError(f"policy table must have shape ({spec.n_cells}, 4), got {probs.shape}")
    rng = rng if rng is not None else np.random.default_rng()
    cum = np.cumsum(probs, axis=1)
    logp = np.log(np.maximum(probs, 1e-300))
    E = int(n_episodes)
    pos = np.full(E, spec.start_id)
    alive = np.ones(E, dtype=bool)
    steps = []
    for t in range(spec.horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        c = pos[idx]
        if greedy:
            a = probs[c].argmax(axis=1)
        else:
            u = rng.random(idx.size)
            a = np.minimum((cum[c] < u[:, None]).sum(axis=1), 3)
        nxt = spec.next_cell[c, a]
        goal = nxt == spec.goal_id
        trunc = ~goal & (t + 1 >= spec.horizon)
        steps.append((idx, c, a, nxt, goal, trunc))
        pos[idx] = nxt
        alive[idx[goal | trunc]] = False

    if steps:
        ep = np.concatenate([s[0] for s in steps])
        tt = np.concatenate([np.full(s[0].size, i) for i, s in enumerate(steps)])
        order = np.lexsort((tt, ep))
        cells, actions, nxt, goal, trunc = (np.concatenate([s[k] for s in steps])[order]
                                            for k in range(1, 6))
        ep = ep[order]
    else:
        cells = actions = nxt = ep = np.zeros(0, dtype=int)
        goal = trunc = np.zeros(0, dtype=bool)
    rewards = goal.astype(float)
    if intrinsic is not None and intrinsic.K > 0:
        intr = intrinsic.transition(cells, nxt)
    else:
        intr = np.zeros((len(cells), 0))
    traj = Trajectory(cells, actions, rewards, intr, logp[cells, actions], nxt, goal, trunc, ep,
                      spec.gamma)
    if counter is not None:
        counter.add(len(traj))
    return traj


# ---------------------------------------------------------------------------
# exact quantities on small tabular problems


@dataclass
class ExactPolicyGradient:
    value: float
    gradient: np.ndarray  # d value / d logits, shape (n_cells, 4)
    reach_probability: float
    kappa: float  # max_{s,a} ||grad log pi(a|s)||


def tabular_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def exact_policy_gradient(spec: GridSpec, logits: np.ndarray) -> ExactPolicyGradient:
    """Finite-horizon discounted objective of a tabular softmax policy, by enumeration.

    The state distribution at each step is propagated forward; the
    time-indexed action values are computed backward.
    """
    pi = tabular_softmax(np.asarray(logits, dtype=float))
    n, H, g = spec.n_cells, spec.horizon, spec.gamma
    R, nxt, goal = spec.reward_table, spec.next_cell, spec.goal_id

    d = np.zeros((H, n))
    d[0, spec.start_id] = 1.0
    for t in range(H - 1):
        flow = d[t][:, None] * pi
        np.add.at(d[t + 1], nxt.ravel(), flow.ravel())
        d[t + 1, goal] = 0.0  # absorbed

    Q = np.zeros((H, n, 4))
    V_next = np.zeros(n)
    for t in range(H - 1, -1, -1):
        cont = np.where(nxt == goal, 0.0, V_next[nxt])
        Q[t] = R + g * cont
        V_next = (pi * Q[t]).sum(axis=1)
    value = float(V_next[spec.start_id])

    grad = np.zeros((n, 4))
    for t in range(H):
        w = (g**t) * d[t][:, None] * pi * Q[t]  # weight of grad log pi(a|s)
        # grad_{theta_s} log pi(a|s) = e_a - pi(s)
        grad += w - w.sum(axis=1, keepdims=True) * pi
    reach = float(sum((d[t][:, None] * pi * (nxt == goal)).sum() for t in range(H)))
    # ||e_a - pi(s)||^2 = 1 - 2 pi_a + ||pi||^2
    norms = np.sqrt(np.maximum(1.0 - 2.0 * pi + (pi**2).sum(axis=1, keepdims=True), 0.0))
    return ExactPolicyGradient(value, grad, reach, float(norms.max()))


def exact_value(spec: GridSpec, logits: np.ndarray) -> float:
    return exact_policy_gradient(spec, logits).value


# ---------------------------------------------------------------------------
# analytic testbed


@dataclass(frozen=True)
class QuadraticObjective:
    """J(theta) = -||theta - center||^2."""

    center: tuple[float, ...] = field(default=(0.0, 0.0))

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def c(self) -> np.ndarray:
        return np.array(self.center)

    def value(self, theta: np.ndarray) -> float:
        return quad_eval(self, theta)[0]

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return quad_eval(self, theta)[1]

    def hvp(self, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
        return -2.0 * np.asarray(v, dtype=float)


def quad_eval(obj: QuadraticObjective, theta: np.ndarray) -> tuple[float, np.ndarray]:
    theta = np.asarray(theta, dtype=float)
    c = obj.c
    if theta.shape != c.shape:
        raise ValueError(f"theta has shape {theta.shape}, objective is {c.shape}-dimensional")
    diff = theta - c
    return -float(diff @ diff), -2.0 * diff
