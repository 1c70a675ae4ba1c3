"""Intrinsic reward sets: graph-Laplacian eigenvectors and frozen random networks.

Each reward is a potential over free cells with values in [-1, 1]; a
transition s -> s' is rewarded with potential(s') - potential(s).
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .envs import GridSpec
from .numerics import MlpSpec, mlp_forward, sym_eig


class IntrinsicRewardError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IntrinsicRewardSet:
    potentials: np.ndarray  # (K, n_cells), each row in [-1, 1]
    provenance: str
    eigenvalues: np.ndarray | None = None
    raw: np.ndarray | None = field(default=None, repr=False)  # pre-rescale vectors

    @property
    def K(self) -> int:
        return int(self.potentials.shape[0])

    def state_rewards(self, cells: np.ndarray) -> np.ndarray:
        """Potential of each cell, shape (len(cells), K)."""
        return self.potentials[:, np.asarray(cells, dtype=int)].T

    def transition(self, cells: np.ndarray, next_cells: np.ndarray) -> np.ndarray:
        return self.state_rewards(next_cells) - self.state_rewards(cells)

    def subset(self, ks) -> "IntrinsicRewardSet":
        ks = list(ks)
        return IntrinsicRewardSet(self.potentials[ks], self.provenance,
                                  None if self.eigenvalues is None else self.eigenvalues[ks],
                                  None if self.raw is None else self.raw[ks])


def empty_rewards(spec: GridSpec) -> IntrinsicRewardSet:
    return IntrinsicRewardSet(np.zeros((0, spec.n_cells)), "none")


def graph_laplacian(spec: GridSpec) -> np.ndarray:
    adj = spec.adjacency()
    return np.diag(adj.sum(axis=1)) - adj


def build_laplacian_rewards(spec: GridSpec, K: int) -> IntrinsicRewardSet:
    """Eigenvectors 2..K+1 of the free-cell graph Laplacian, scaled to max |value| = 1."""
    comps = spec.components()
    if len(comps) > 1:
        desc = "; ".join(f"component {i} ({len(c)} cells, e.g. {c[0]})" for i, c in enumerate(comps))
        raise IntrinsicRewardError(f"free-cell graph is disconnected: {desc}")
    if not 1 <= K <= spec.n_cells - 1:
        raise IntrinsicRewardError(f"K must be in [1, {spec.n_cells - 1}], got {K}")
    evals, evecs = sym_eig(graph_laplacian(spec))
    raw = evecs[:, 1:K + 1].T.copy()
    pots = raw / np.abs(raw).max(axis=1, keepdims=True)
    flip = pots[:, spec.start_id] > 0
    pots[flip] *= -1.0
    raw[flip] *= -1.0
    return IntrinsicRewardSet(pots, "laplacian", evals[1:K + 1].copy(), raw)


def build_random_rewards(spec: GridSpec, K: int, seed: int, zero_init: bool = False,
                         hidden: tuple[int, ...] = (64, 64)) -> IntrinsicRewardSet:
    """Frozen randomly initialized tanh network mapping observations to K channels."""
    if K < 1:
        raise IntrinsicRewardError(f"K must be >= 1, got {K}")
    net = MlpSpec(spec.obs_table.shape[1], hidden, K)
    params = np.zeros(net.num_params) if zero_init else net.init_params(np.random.default_rng(seed))
    out, _ = mlp_forward(net, params, spec.obs_table)
    raw = out.T.copy()
    lo = raw.min(axis=1, keepdims=True)
    hi = raw.max(axis=1, keepdims=True)
    if np.any(hi - lo <= 1e-12):
        raise IntrinsicRewardError("constant reward channel: cannot rescale to [-1, 1]")
    pots = np.clip(2.0 * (raw - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    return IntrinsicRewardSet(pots, "random_network", None, raw)


def build_rewards(spec: GridSpec, kind: str, K: int, seed: int = 0) -> IntrinsicRewardSet:
    if K == 0:
        return empty_rewards(spec)
    if kind == "laplacian":
        return build_laplacian_rewards(spec, K)
    if kind in ("random", "random_network"):
        return build_random_rewards(spec, K, seed)
    raise IntrinsicRewardError(f"unknown intrinsic reward kind {kind!r}")


def dump_reward_maps(rewards: IntrinsicRewardSet, spec: GridSpec) -> str:
    """CSV with one row per (free cell, reward index)."""
    buf = io.StringIO()
    buf.write("x,y,k,value\n")
    for k in range(rewards.K):
        for i, (x, y) in enumerate(spec.free_cells):
            buf.write(f"{x},{y},{k},{rewards.potentials[k, i]:.10g}\n")
    return buf.getvalue()
