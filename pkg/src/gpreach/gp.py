"""Exact Gaussian-process posterior inference on a fixed dataset.

The posterior for a single output dimension is parameterized by the
Cholesky factor of the regularized Gram matrix ``K + lam^2 I`` and the
coefficient vector ``alpha = (K + lam^2 I)^{-1} y``:

    mean(z)      = k_vec(z)' alpha
    cov(z, z')   = k(z, z') - k_vec(z)' (K + lam^2 I)^{-1} k_vec(z')
    var(z)       = cov(z, z)   (clamped to [0, k(z, z)])

The factorization is escalated with a trace-scaled jitter when near
duplicate inputs make it fail.  ``GpPosterior`` is immutable after
construction and safe for concurrent reads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cholesky, solve_triangular

from .kernels import Kernel, _as_2d

# Jitter escalation: relative factors applied to trace/D.
_JITTER_START = 1e-12
_JITTER_MAX = 1e-6


class FactorizationError(RuntimeError):
    """Raised when a Gram matrix cannot be factorized even with jitter."""


def chol_with_jitter(A: NDArray) -> tuple[NDArray, float]:
    """Lower Cholesky factor of ``A``, escalating jitter on failure.

    Jitter starts at ``1e-12 * trace(A)/n`` and is multiplied by 10 until
    ``1e-6 * trace(A)/n``; beyond that a ``FactorizationError`` is raised.

    Returns
    -------
    (L, jitter) : lower-triangular factor and the jitter actually added.
    """
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    try:
        return cholesky(A, lower=True), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.trace(A)) / n
    if scale <= 0:
        scale = 1.0
    eye = np.eye(n)
    rel = _JITTER_START
    while rel <= _JITTER_MAX:
        try:
            return cholesky(A + rel * scale * eye, lower=True), rel * scale
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise FactorizationError(
        f"Cholesky failed for {n}x{n} matrix even with jitter {_JITTER_MAX * scale:.3e}"
    )


@dataclass(frozen=True)
class Dataset:
    """Regression data for one or more output dimensions sharing inputs.

    Parameters
    ----------
    inputs : (D, d) array
        Input locations.
    outputs : (n_outputs, D) array
        One row of targets per output dimension.
    noise_scale : float
        Sub-Gaussian noise proxy ``lam > 0``; regularizes the Gram solve
        even for noise-free data (set it tiny in that case).
    noise_bound : float or None
        Optional hard bound on the measurement noise magnitude.
    """

    inputs: NDArray
    outputs: NDArray
    noise_scale: float
    noise_bound: float | None = None

    def __post_init__(self):
        Z = np.asarray(self.inputs, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        Y = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        if Y.shape[1] != Z.shape[0]:
            raise ValueError(
                f"outputs have {Y.shape[1]} points per dimension, inputs have {Z.shape[0]}"
            )
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive")
        if self.noise_bound is not None and self.noise_bound < 0:
            raise ValueError("noise_bound must be nonnegative")
        object.__setattr__(self, "inputs", Z)
        object.__setattr__(self, "outputs", Y)

    @property
    def n_points(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.outputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def output(self, i: int) -> NDArray:
        return self.outputs[i]

    @classmethod
    def empty(cls, input_dim: int, noise_scale: float, n_outputs: int = 1,
              noise_bound: float | None = None) -> "Dataset":
        return cls(np.zeros((0, input_dim)), np.zeros((n_outputs, 0)),
                   noise_scale, noise_bound)

    @classmethod
    def from_csv(cls, path: str | Path, n_outputs: int, noise_scale: float,
                 noise_bound: float | None = None) -> "Dataset":
        """Load from a CSV with header ``z_1..z_d, y_1..y_{n_outputs}``."""
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ValueError(f"{path}: missing header row")
            header = [h.strip() for h in header]
            z_cols = [i for i, h in enumerate(header) if h.startswith("z_")]
            y_cols = [i for i, h in enumerate(header) if h.startswith("y_")]
            if not z_cols or len(y_cols) != n_outputs:
                raise ValueError(
                    f"{path}: expected z_* columns and {n_outputs} y_* columns, got {header}"
                )
            rows = [[float(v) for v in row] for row in reader if row]
        data = np.asarray(rows, dtype=float).reshape(len(rows), len(header))
        Z = data[:, z_cols]
        Y = data[:, y_cols].T
        return cls(Z, Y, noise_scale, noise_bound)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        d, m = self.input_dim, self.n_outputs
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"z_{i + 1}" for i in range(d)] + [f"y_{i + 1}" for i in range(m)])
            for j in range(self.n_points):
                writer.writerow([repr(float(v)) for v in self.inputs[j]]
                                + [repr(float(self.outputs[i, j])) for i in range(m)])


class GpPosterior:
    """Posterior of a single-output GP given a dataset.

    The constructor factorizes ``K + lam^2 I`` once; all queries reuse the
    factor.  Negative variances from roundoff are clamped to zero, and
    variances are clamped from above by the prior ``k(z, z)``.
    """

    def __init__(self, kernel: Kernel, dataset: Dataset, output_index: int = 0):
        if dataset.n_outputs <= output_index:
            raise ValueError("output_index out of range")
        self.kernel = kernel
        self.dataset = dataset
        self.inputs = dataset.inputs
        self.targets = dataset.output(output_index)
        self.noise_scale = float(dataset.noise_scale)
        D = self.n_points
        K = kernel.gram(self.inputs)
        self.gram_matrix = K
        A = K + (self.noise_scale ** 2) * np.eye(D)
        self.chol, self.jitter = chol_with_jitter(A)
        if D:
            self.whitened_targets = solve_triangular(self.chol, self.targets, lower=True)
            self.alpha = solve_triangular(self.chol.T, self.whitened_targets, lower=False)
        else:
            self.whitened_targets = np.zeros(0)
            self.alpha = np.zeros(0)

    @property
    def n_points(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def _check_dim(self, Z: NDArray) -> NDArray:
        Z = _as_2d(Z)
        if Z.shape[1] != self.input_dim:
            raise ValueError(f"query dimension {Z.shape[1]} != data dimension {self.input_dim}")
        return Z

    def cross_gram(self, Z: NDArray) -> NDArray:
        """k_vec matrix between training inputs and query points, (D, m)."""
        return self.kernel.gram(self.inputs, self._check_dim(Z))

    def mean(self, Z: NDArray) -> NDArray:
        """Posterior mean at query points, shape (m,)."""
        Z = self._check_dim(Z)
        if self.n_points == 0:
            return np.zeros(Z.shape[0])
        return self.cross_gram(Z).T @ self.alpha

    def var(self, Z: NDArray) -> NDArray:
        """Posterior variance at query points, clamped to [0, k(z, z)]."""
        Z = self._check_dim(Z)
        prior = self.kernel.diag_value()
        if self.n_points == 0:
            return np.full(Z.shape[0], prior)
        V = solve_triangular(self.chol, self.cross_gram(Z), lower=True)
        raw = prior - np.einsum("ij,ij->j", V, V)
        return np.clip(raw, 0.0, prior)

    def std(self, Z: NDArray) -> NDArray:
        return np.sqrt(self.var(Z))

    def cov(self, za: NDArray, zb: NDArray) -> float:
        """Posterior covariance between two single query points."""
        za = self._check_dim(za)
        zb = self._check_dim(zb)
        prior = self.kernel(za[0], zb[0])
        if self.n_points == 0:
            return prior
        Va = solve_triangular(self.chol, self.cross_gram(za), lower=True)
        Vb = solve_triangular(self.chol, self.cross_gram(zb), lower=True)
        return float(prior - Va[:, 0] @ Vb[:, 0])

    def cov_matrix(self, Z: NDArray) -> NDArray:
        """Posterior covariance matrix on a set of query points, (m, m)."""
        Z = self._check_dim(Z)
        prior = self.kernel.gram(Z)
        if self.n_points == 0:
            return prior
        V = solve_triangular(self.chol, self.cross_gram(Z), lower=True)
        return prior - V.T @ V

    def mean_rkhs_norm(self) -> float:
        """RKHS norm of the posterior mean, sqrt(alpha' K alpha)."""
        if self.n_points == 0:
            return 0.0
        return float(np.sqrt(max(self.alpha @ self.gram_matrix @ self.alpha, 0.0)))

    def logdet_whitened(self) -> float:
        """log det(I + lam^-2 K), computed from the stored factor."""
        D = self.n_points
        if D == 0:
            return 0.0
        # det(K + lam^2 I) = lam^(2D) det(I + lam^-2 K)
        logdet_reg = 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        out = logdet_reg - 2.0 * D * np.log(self.noise_scale)
        if not np.isfinite(out):
            raise FactorizationError("non-finite log-determinant")
        return out

    def training_std(self) -> NDArray:
        """Posterior standard deviation at the training inputs."""
        if self.n_points == 0:
            return np.zeros(0)
        return self.std(self.inputs)


def multi_output_posteriors(kernels: list[Kernel] | Kernel, dataset: Dataset) -> list[GpPosterior]:
    """Independent single-output posteriors sharing the dataset inputs."""
    if isinstance(kernels, Kernel):
        kernels = [kernels] * dataset.n_outputs
    if len(kernels) != dataset.n_outputs:
        raise ValueError("need one kernel per output dimension")
    return [GpPosterior(k, dataset, i) for i, k in enumerate(kernels)]


@dataclass(frozen=True)
class RkhsFunction:
    """Finite kernel expansion ``f(z) = sum_i w_i k(c_i, z)``.

    Used to build ground-truth functions with a computable RKHS norm
    ``sqrt(w' K w)`` for verification harnesses.
    """

    kernel: Kernel
    centers: NDArray = field(default_factory=lambda: np.zeros((0, 1)))
    weights: NDArray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        C = np.asarray(self.centers, dtype=float)
        if C.ndim == 1:
            C = C[:, None]
        if C.size == 0:
            C = C.reshape(0, C.shape[1] if C.ndim == 2 else 1)
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if C.shape[0] != w.shape[0]:
            raise ValueError("centers and weights must have matching length")
        object.__setattr__(self, "centers", C)
        object.__setattr__(self, "weights", w)

    def __call__(self, Z: NDArray) -> NDArray:
        Z = _as_2d(Z)
        if self.weights.shape[0] == 0:
            return np.zeros(Z.shape[0])
        if Z.shape[1] != self.centers.shape[1]:
            raise ValueError("query dimension mismatch")
        return self.kernel.gram(Z, self.centers) @ self.weights

    def value(self, z: NDArray) -> float:
        return float(self(np.atleast_2d(z))[0])

    def rkhs_norm(self) -> float:
        if self.weights.shape[0] == 0:
            return 0.0
        K = self.kernel.gram(self.centers)
        return float(np.sqrt(max(self.weights @ K @ self.weights, 0.0)))

    def scaled(self, factor: float) -> "RkhsFunction":
        return RkhsFunction(self.kernel, self.centers, self.weights * factor)
