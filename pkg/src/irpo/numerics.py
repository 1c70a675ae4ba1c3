"""Small dense differentiable-computation core.

Everything here works on flat float64 parameter vectors. The MLP tape keeps
the per-layer activations of a forward pass, which is enough for a reverse
pass (``grad``) and for a forward-over-reverse pass (``hvp``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Shapes or sizes that do not fit together."""


class NumericalError(ArithmeticError):
    """A non-finite value showed up where it must not."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ConfigurationError(f"all MLP dimensions must be >= 1, got {dims}")
        if self.activation != "tanh":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum((i + 1) * o for i, o in self.layer_dims)

    def layers(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``params``; W has shape (in, out)."""
        if params.shape != (self.num_params,):
            raise ConfigurationError(
                f"expected {self.num_params} parameters, got shape {params.shape}")
        out, offset = [], 0
        for i, o in self.layer_dims:
            w = params[offset:offset + i * o].reshape(i, o)
            offset += i * o
            b = params[offset:offset + o]
            offset += o
            out.append((w, b))
        return out

    def init_params(self, rng: np.random.Generator, output_scale: float = 1.0) -> np.ndarray:
        """LeCun-normal weights, zero biases; the last layer is scaled by ``output_scale``."""
        params = np.zeros(self.num_params)
        layers = self.layers(params)
        for n, (w, _) in enumerate(layers):
            w[...] = rng.standard_normal(w.shape) / np.sqrt(w.shape[0])
            if n == len(layers) - 1:
                w *= output_scale
        return params


@dataclass
class GradTape:
    """Saved forward pass of one MLP evaluation on a batch of inputs."""

    spec: MlpSpec
    params: np.ndarray
    inputs: np.ndarray
    # activations[0] is the input, activations[l] the post-tanh output of hidden layer l
    activations: list[np.ndarray] = field(default_factory=list)
    output: np.ndarray | None = None
    squeeze: bool = False

    def replay(self) -> np.ndarray:
        out, _ = mlp_forward(self.spec, self.params, self.inputs)
        return out


def mlp_forward(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray) -> tuple[np.ndarray, GradTape]:
    """Evaluate the network on one input vector or a batch (rows)."""
    params = np.asarray(params, dtype=float)
    x = np.asarray(inputs, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigurationError(
            f"input has shape {np.shape(inputs)}, network expects {spec.input_dim} features")
    layers = spec.layers(params)
    acts = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        acts.append(h)
    w, b = layers[-1]
    z = h @ w + b
    tape = GradTape(spec, params, x, acts, z, squeeze)
    return (z[0] if squeeze else z), tape


def _as_batch(tape: GradTape, arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if tape.squeeze and arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape != tape.output.shape:
        raise ConfigurationError(f"{what} has shape {arr.shape}, output is {tape.output.shape}")
    return arr


def grad(tape: GradTape, output_seed: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(output_seed * output)`` with respect to the parameters."""
    g_a = _as_batch(tape, output_seed, "output seed")
    layers = tape.spec.layers(tape.params)
    out = np.empty_like(tape.params)
    grads = tape.spec.layers(out)
    for l in range(len(layers) - 1, -1, -1):
        h_in = tape.activations[l]
        gw, gb = grads[l]
        gw[...] = h_in.T @ g_a
        gb[...] = g_a.sum(axis=0)
        if l:
            g_a = (g_a @ layers[l][0].T) * (1.0 - h_in**2)
    return out


def jvp(tape: GradTape, v: np.ndarray) -> np.ndarray:
    """Directional derivative of the output along parameter direction ``v``."""
    return _forward_tangents(tape, v)[-1]


def _forward_tangents(tape: GradTape, v: np.ndarray) -> list[np.ndarray]:
    layers = tape.spec.layers(tape.params)
    dlayers = tape.spec.layers(np.asarray(v, dtype=float))
    dh = np.zeros_like(tape.inputs)
    tangents = [dh]
    for l, ((w, _), (dw, db)) in enumerate(zip(layers, dlayers)):
        h_in = tape.activations[l]
        da = dh @ w + h_in @ dw + db
        if l < len(layers) - 1:
            h_out = tape.activations[l + 1]
            dh = (1.0 - h_out**2) * da
            tangents.append(dh)
        else:
            tangents.append(da)
    return tangents


class Head:
    """Scalar objective f(z) of the network output z (batch rows)."""

    def value(self, z: np.ndarray) -> float:
        raise NotImplementedError

    def seed(self, z: np.ndarray) -> np.ndarray:
        """df/dz."""
        raise NotImplementedError

    def seed_tangent(self, z: np.ndarray, dz: np.ndarray) -> np.ndarray:
        """(d^2 f / dz^2) dz."""
        raise NotImplementedError


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


class LogSoftmaxHead(Head):
    """f(z) = sum_i sum_a weights[i, a] * log softmax(z_i)[a].

    One-hot rows scaled by advantages give the usual policy-gradient surrogate;
    rows may also hold aggregated weights of repeated states.
    """

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=float)

    def value(self, z):
        return float((self.weights * log_softmax(z)).sum())

    def seed(self, z):
        p = softmax(z)
        return self.weights - self.weights.sum(axis=1, keepdims=True) * p

    def seed_tangent(self, z, dz):
        p = softmax(z)
        dp = p * (dz - (p * dz).sum(axis=1, keepdims=True))
        return -self.weights.sum(axis=1, keepdims=True) * dp


class CategoricalKLHead(Head):
    """f(z) = sum_i w_i KL(ref_i || softmax(z_i)). Its Hessian at z = log(ref) is the Fisher."""

    def __init__(self, ref_probs: np.ndarray, weights: np.ndarray):
        self.ref = np.asarray(ref_probs, dtype=float)
        self.w = np.asarray(weights, dtype=float)[:, None]

    def value(self, z):
        logp = log_softmax(z)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(self.ref > 0, self.ref * (np.log(self.ref) - logp), 0.0)
        return float((self.w * terms).sum())

    def seed(self, z):
        return self.w * (softmax(z) - self.ref)

    def seed_tangent(self, z, dz):
        p = softmax(z)
        return self.w * p * (dz - (p * dz).sum(axis=1, keepdims=True))


class GaussianLogDensityHead(Head):
    """Diagonal Gaussian log-density; z = [mean | log_std] along the last axis."""

    def __init__(self, actions: np.ndarray, weights: np.ndarray):
        self.actions = np.atleast_2d(np.asarray(actions, dtype=float))
        self.w = np.asarray(weights, dtype=float)[:, None]

    def _split(self, z):
        d = self.actions.shape[1]
        if z.shape[1] != 2 * d:
            raise ConfigurationError(f"Gaussian head needs {2 * d} outputs, got {z.shape[1]}")
        return z[:, :d], z[:, d:]

    def value(self, z):
        mu, ls = self._split(z)
        u = (self.actions - mu) * np.exp(-ls)
        return float((self.w * (-0.5 * u**2 - ls - 0.5 * np.log(2 * np.pi))).sum())

    def seed(self, z):
        mu, ls = self._split(z)
        u = self.actions - mu
        rho = np.exp(-2.0 * ls)
        return np.concatenate([self.w * u * rho, self.w * (u**2 * rho - 1.0)], axis=1)

    def seed_tangent(self, z, dz):
        mu, ls = self._split(z)
        dmu, dls = self._split(dz)
        u = self.actions - mu
        rho = np.exp(-2.0 * ls)
        t_mu = self.w * (-rho * dmu - 2.0 * u * rho * dls)
        t_ls = self.w * (-2.0 * u * rho * dmu - 2.0 * u**2 * rho * dls)
        return np.concatenate([t_mu, t_ls], axis=1)


class SquaredErrorHead(Head):
    """f(z) = sum_i w_i * ||z_i - target_i||^2."""

    def __init__(self, targets: np.ndarray, weights: np.ndarray | None = None):
        self.targets = np.asarray(targets, dtype=float)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        n = self.targets.shape[0]
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
        self.w = w[:, None]

    def value(self, z):
        return float((self.w * (z - self.targets) ** 2).sum())

    def seed(self, z):
        return 2.0 * self.w * (z - self.targets)

    def seed_tangent(self, z, dz):
        return 2.0 * self.w * dz


def value_and_grad(tape: GradTape, head: Head) -> tuple[float, np.ndarray]:
    z = tape.output
    return head.value(z), grad(tape, head.seed(z))


def hvp(tape: GradTape, objective: Head, v: np.ndarray) -> np.ndarray:
    """Hessian of ``objective(output(params))`` times ``v``, by forward-over-reverse."""
    if not isinstance(objective, Head):
        raise TypeError("hvp needs a scalar Head objective recorded on top of the tape")
    v = np.asarray(v, dtype=float)
    if v.shape != tape.params.shape:
        raise ConfigurationError(f"direction has shape {v.shape}, expected {tape.params.shape}")
    tangents = _forward_tangents(tape, v)
    z = tape.output
    g_a = objective.seed(z)
    dg_a = objective.seed_tangent(z, tangents[-1])
    layers = tape.spec.layers(tape.params)
    dlayers = tape.spec.layers(v)
    out = np.empty_like(tape.params)
    res = tape.spec.layers(out)
    for l in range(len(layers) - 1, -1, -1):
        h_in, dh_in = tape.activations[l], tangents[l]
        rw, rb = res[l]
        rw[...] = dh_in.T @ g_a + h_in.T @ dg_a
        rb[...] = dg_a.sum(axis=0)
        if l:
            w, dw = layers[l][0], dlayers[l][0]
            g_h = g_a @ w.T
            dg_h = dg_a @ w.T + g_a @ dw.T
            deriv = 1.0 - h_in**2
            g_a, dg_a = g_h * deriv, dg_h * deriv - 2.0 * g_h * h_in * dh_in
    return out


def conjugate_gradient(apply_A: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       iters: int = 10, damping: float = 0.0,
                       tol: float = 1e-8) -> tuple[np.ndarray, float]:
    """Solve (A + damping*I) x = b for symmetric PSD A. Returns (x, residual norm)."""
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    target = tol * np.sqrt(rr)
    if rr == 0.0:
        return x, 0.0
    for _ in range(iters):
        Ap = apply_A(p) + damping * p
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0.0:
            raise NumericalError(f"conjugate gradient broke down (p'Ap = {pAp})")
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            raise NumericalError("non-finite residual in conjugate gradient")
        if np.sqrt(rr_new) <= target:
            rr = rr_new
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, float(np.sqrt(rr))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """n-1 (or n) rounds of disjoint index pairs covering every pair once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p = np.array(players[: m // 2])
        q = np.array(players[m - 1: m // 2 - 1: -1])
        keep = (p < n) & (q < n)
        lo, hi = np.minimum(p, q)[keep], np.maximum(p, q)[keep]
        rounds.append((lo, hi))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def sym_eig(matrix: np.ndarray, tol: float = 1e-14,
            max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations on disjoint index pairs commute, so each round-robin round is
    applied to all of its pairs at once.
    """
    a = np.array(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigurationError(f"sym_eig needs a square matrix, got {a.shape}")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > 1e-10 * scale:
        raise ValueError("sym_eig: matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    rounds = _round_robin(n)
    norm = np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = np.sqrt(max(norm**2 - float((a.diagonal() ** 2).sum()), 0.0))
        if off <= tol * norm:
            break
        for p, q in rounds:
            apq = a[p, q]
            nz = np.abs(apq) > 1e-300
            safe = np.where(nz, apq, 1.0)
            theta = (a[q, q] - a[p, p]) / (2.0 * safe)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(1.0, theta))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(nz, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t**2)
            s = t * c
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        # recompute the norm from the rotated matrix to avoid drift
        norm = np.linalg.norm(a)
    order = np.argsort(a.diagonal(), kind="stable")
    return a.diagonal()[order].copy(), v[:, order]


def flat_concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(p) for p in parts])
