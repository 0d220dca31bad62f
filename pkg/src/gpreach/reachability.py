"""Reachable tubes around sampled trajectories.

Rolling out every sampled dynamics under a shared input sequence gives a
cloud of centers; the residual uncertainty (the eps-closeness gap of the
best sample plus the bounded noise) is propagated around each center via
Lipschitz continuity:

    radius(k) = eps_bar * sum_{i<k} L^i,   eps_bar = ||B_d|| (eps + w_bar).

The same machinery yields the per-step candidate-shift deviation bounds
c_i and the cumulative constraint tightenings used by the controller.
Distances may be measured in a weighted norm ||x||_P (optionally paired
with a linear state feedback) to certify a smaller Lipschitz constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cholesky, solve_triangular

from .sampling import rollout_sample


class Metric:
    """Euclidean or P-weighted vector norm with its dual."""

    def __init__(self, weight: NDArray | None = None):
        if weight is None:
            self.weight = None
            self._chol = None
        else:
            W = np.asarray(weight, dtype=float)
            if W.ndim != 2 or W.shape[0] != W.shape[1]:
                raise ValueError("weight must be a square matrix")
            if not np.allclose(W, W.T, atol=1e-10):
                raise ValueError("weight must be symmetric")
            try:
                self._chol = cholesky(W, lower=True)
            except np.linalg.LinAlgError as err:
                raise ValueError("weight must be positive definite") from err
            self.weight = W

    @classmethod
    def euclidean(cls) -> "Metric":
        return cls(None)

    @classmethod
    def weighted(cls, P: NDArray) -> "Metric":
        return cls(P)

    @property
    def is_euclidean(self) -> bool:
        return self.weight is None

    def mat(self, dim: int | None = None) -> NDArray:
        if self.weight is not None:
            return self.weight
        if dim is None:
            raise ValueError("euclidean metric needs a dimension for its matrix")
        return np.eye(dim)

    def norm(self, v: NDArray) -> float:
        v = np.asarray(v, dtype=float).ravel()
        if self.weight is None:
            return float(np.linalg.norm(v))
        return float(np.linalg.norm(self._chol.T @ v))

    def norms(self, V: NDArray) -> NDArray:
        """Row-wise norms of a (m, n) array."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if self.weight is None:
            return np.linalg.norm(V, axis=1)
        return np.linalg.norm(V @ self._chol, axis=1)

    def dual_norm(self, a: NDArray) -> float:
        """sup of a'e over the unit ball of this metric (= ||a||_{P^-1})."""
        a = np.asarray(a, dtype=float).ravel()
        if self.weight is None:
            return float(np.linalg.norm(a))
        return float(np.linalg.norm(solve_triangular(self._chol, a, lower=True)))

    def matrix_norm(self, A: NDArray) -> float:
        """Induced norm sup ||A v|| / ||v|| in this metric."""
        A = np.asarray(A, dtype=float)
        if self.weight is None:
            return float(np.linalg.norm(A, 2))
        M = self._chol.T @ A
        M = solve_triangular(self._chol, M.T, lower=True).T
        return float(np.linalg.norm(M, 2))

    def unit_sphere(self, n_points: int, dim: int, rng: np.random.Generator) -> NDArray:
        """Points on the unit sphere of this metric (rows)."""
        raw = rng.standard_normal((n_points, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        if self.weight is None:
            return raw
        return solve_triangular(self._chol.T, raw.T, lower=False).T


@dataclass(frozen=True)
class LipschitzConfig:
    """Certified Lipschitz constant of the true dynamics in a metric.

    When ``feedback`` is set, stored input sequences are realized as
    u = K x + v and the constant refers to the closed-loop map.
    """

    constant: float
    metric: Metric = field(default_factory=Metric.euclidean)
    feedback: NDArray | None = None

    def __post_init__(self):
        if not self.constant > 0:
            raise ValueError("Lipschitz constant must be positive")
        if self.feedback is not None:
            object.__setattr__(self, "feedback",
                               np.atleast_2d(np.asarray(self.feedback, dtype=float)))


@dataclass(frozen=True)
class UncertaintyBudget:
    """Per-step residual uncertainty entering the tube recursion.

    eps_bar   = sum_i ||B_d col i|| (eps_i + w_bar_i)   (one-step residual)
    eps_term  = sum_i ||B_d col i|| eps_i               (doubling term in c_i)

    The scalar-output case reduces to ||B_d|| (eps + w_bar).
    """

    eps: NDArray
    noise_bound: NDArray
    col_norms: NDArray

    def __post_init__(self):
        eps = np.atleast_1d(np.asarray(self.eps, dtype=float))
        wb = np.atleast_1d(np.asarray(self.noise_bound, dtype=float))
        cn = np.atleast_1d(np.asarray(self.col_norms, dtype=float))
        if not (eps.shape == wb.shape == cn.shape):
            raise ValueError("eps, noise_bound, col_norms must share one entry per output")
        if np.any(eps < 0) or np.any(wb < 0) or np.any(cn < 0):
            raise ValueError("budget entries must be nonnegative")
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "noise_bound", wb)
        object.__setattr__(self, "col_norms", cn)

    @property
    def eps_bar(self) -> float:
        return float(self.col_norms @ (self.eps + self.noise_bound))

    @property
    def eps_term(self) -> float:
        return float(self.col_norms @ self.eps)

    @classmethod
    def scalar(cls, eps: float, noise_bound: float, bd_norm: float) -> "UncertaintyBudget":
        return cls(np.array([eps]), np.array([noise_bound]), np.array([bd_norm]))

    @classmethod
    def from_matrix(cls, B_d: NDArray, eps, noise_bound, metric: Metric | None = None
                    ) -> "UncertaintyBudget":
        B_d = np.atleast_2d(np.asarray(B_d, dtype=float))
        n_g = B_d.shape[1]
        metric = metric if metric is not None else Metric.euclidean()
        cols = np.array([metric.norm(B_d[:, i]) for i in range(n_g)])
        eps = np.full(n_g, eps, dtype=float) if np.isscalar(eps) else np.asarray(eps, dtype=float)
        wb = (np.full(n_g, noise_bound, dtype=float) if np.isscalar(noise_bound)
              else np.asarray(noise_bound, dtype=float))
        return cls(eps, wb, cols)


def lipschitz_power_sums(L: float, H: int) -> NDArray:
    """S_k = sum_{i<k} L^i for k = 0..H (S_0 = 0)."""
    out = np.zeros(H + 1)
    term = 1.0
    for k in range(1, H + 1):
        out[k] = out[k - 1] + term
        term *= L
    return out


def tube_radii(lcfg: LipschitzConfig, budget: UncertaintyBudget, H: int) -> NDArray:
    """Tube radii eps_bar * S_k for k = 0..H (radius 0 at the start)."""
    if H < 0:
        raise ValueError("horizon must be nonnegative")
    return budget.eps_bar * lipschitz_power_sums(lcfg.constant, H)


def tightenings(lcfg: LipschitzConfig, budget: UncertaintyBudget, H: int
                ) -> tuple[NDArray, NDArray]:
    """Per-step deviation bounds c_i and cumulative tightenings Delta_i.

    c_i = L^i eps_bar + 2 eps_term sum_{j<i} L^j for i in [0, H-1];
    Delta_i = sum_{j<i} c_j with Delta_0 = 0.
    """
    if H < 1:
        raise ValueError("horizon must be at least 1")
    L = lcfg.constant
    sums = lipschitz_power_sums(L, H)
    powers = L ** np.arange(H)
    c = powers * budget.eps_bar + 2.0 * budget.eps_term * sums[:H]
    delta = np.concatenate([[0.0], np.cumsum(c)[:-1]])
    return c, delta


@dataclass(frozen=True)
class ReachTube:
    """Sampled trajectory centers plus Lipschitz-accumulated radii."""

    centers: NDArray  # (n_samples, H+1, n_x)
    radii: NDArray  # (H+1,)
    metric: Metric = field(default_factory=Metric.euclidean)

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float)
        radii = np.asarray(self.radii, dtype=float)
        if centers.ndim != 3:
            raise ValueError("centers must be (n_samples, H+1, n_x)")
        if radii.shape[0] != centers.shape[1]:
            raise ValueError("need one radius per time step")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "radii", radii)

    @property
    def horizon(self) -> int:
        return self.centers.shape[1] - 1

    @property
    def n_samples(self) -> int:
        return self.centers.shape[0]

    def distance(self, k: int, x: NDArray) -> float:
        """Distance of x to the nearest center at step k."""
        diffs = self.centers[:, k, :] - np.asarray(x, dtype=float).ravel()
        return float(np.min(self.metric.norms(diffs)))

    def contains(self, k: int, x: NDArray, slack: float = 1e-12) -> bool:
        if not 0 <= k <= self.horizon:
            raise ValueError("step index out of range")
        return self.distance(k, x) <= self.radii[k] + slack

    def contains_trajectory(self, xs: NDArray, slack: float = 1e-12) -> bool:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return all(self.contains(k, xs[k], slack) for k in range(xs.shape[0]))


def build_tube(samples, plant, x0: NDArray, inputs: NDArray,
               lcfg: LipschitzConfig, budget: UncertaintyBudget) -> ReachTube:
    """Roll out every sample under the shared inputs and attach radii."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    H = inputs.shape[0] if inputs.size else 0
    centers = np.stack([
        rollout_sample(s, plant, x0, inputs, feedback=lcfg.feedback) for s in samples
    ])
    return ReachTube(centers, tube_radii(lcfg, budget, H), lcfg.metric)


def estimate_lipschitz(step_map, state_box, input_box, metric: Metric,
                       points_per_dim: int = 5, fd_step: float = 1e-6,
                       inflation: float = 1.10) -> float:
    """Grid estimate of the Lipschitz constant of x -> step_map(x, u).

    Maximizes the metric-induced Jacobian norm over a tensor grid of the
    constraint box and inflates the maximum.  A helper for experiments;
    certified runs should pass an externally validated constant.
    """
    xs = state_box.grid(points_per_dim)
    us = input_box.grid(points_per_dim)
    n_x = state_box.dim
    worst = 0.0
    for x in xs:
        for u in us:
            J = np.zeros((n_x, n_x))
            fx = step_map(x, u)
            for j in range(n_x):
                dx = np.zeros(n_x)
                dx[j] = fd_step
                J[:, j] = (step_map(x + dx, u) - fx) / fd_step
            worst = max(worst, metric.matrix_norm(J))
    return worst * inflation


def baseline_sequential_tube(gps, plant, x0: NDArray, inputs: NDArray,
                             lcfg: LipschitzConfig, betas, noise_bound,
                             shell_points: int = 24,
                             rng: np.random.Generator | None = None) -> NDArray:
    """Worst-case sequential ball propagation for comparison plots.

    Around the posterior-mean trajectory, each step inflates the ball by
    the Lipschitz factor plus the worst confidence-scaled standard
    deviation found on a sampled shell of the current ball:

        r_{k+1} = L r_k + sum_i ||B_d col i|| (sqrt(beta_i) sigma_i_max + w_bar_i).

    This reproduces the qualitative exponential growth of sequential
    over-approximation methods; it is not a faithful reimplementation of
    any particular one.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    H = inputs.shape[0]
    n_x = np.asarray(x0).ravel().shape[0]
    betas = np.atleast_1d(np.asarray(betas, dtype=float))
    wb = (np.full(len(gps), noise_bound, dtype=float) if np.isscalar(noise_bound)
          else np.asarray(noise_bound, dtype=float))
    dirs = lcfg.metric.unit_sphere(shell_points, n_x, rng)
    box = plant.state_box if hasattr(plant, "state_box") else plant.model.state_box

    radii = np.zeros(H + 1)
    x = np.asarray(x0, dtype=float).ravel()
    for k in range(H):
        u = inputs[k] if lcfg.feedback is None else lcfg.feedback @ x + inputs[k]
        shell = x[None, :] if radii[k] == 0 else np.vstack([x[None, :], x + radii[k] * dirs])
        # only admissible states matter for the worst-case terms
        shell = np.clip(shell, box.lo, box.hi)
        cols = plant.bd_col_norms(metric=lcfg.metric, probe_states=shell) \
            if hasattr(plant, "bd_col_norms") else plant.model.bd_col_norms(
                metric=lcfg.metric, probe_states=shell)
        zs = np.array([_gp_input(plant, xs, u) for xs in shell])
        grow = 0.0
        for i, gp in enumerate(gps):
            sigma_max = float(np.max(gp.std(zs)))
            grow += cols[i] * (np.sqrt(betas[i]) * sigma_max + wb[i])
        radii[k + 1] = lcfg.constant * radii[k] + grow
        z = _gp_input(plant, x, u)
        mean_g = np.array([gp.mean(z[None, :])[0] for gp in gps])
        x = _plant_f(plant, x, u) + _plant_bd(plant, x) @ mean_g
    return radii


def _gp_input(plant, x, u):
    return plant.gp_input(x, u) if hasattr(plant, "gp_input") else plant.model.gp_input(x, u)


def _plant_f(plant, x, u):
    return plant.f(x, u) if hasattr(plant, "f") else plant.model.f(x, u)


def _plant_bd(plant, x):
    return plant.bd(x) if hasattr(plant, "bd") else plant.model.bd(x)
