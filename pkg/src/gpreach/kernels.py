"""Stationary covariance kernels with per-dimension lengthscales.

Two families are provided: the squared-exponential kernel and Matern
kernels restricted to half-integer smoothness (1/2, 3/2, 5/2), for which
closed forms exist and no Bessel evaluation is needed.  Both are
stationary, so ``k(z, z) == signal_variance`` for every input, and both
produce symmetric positive semidefinite Gram matrices on distinct points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

_MATERN_NU = (0.5, 1.5, 2.5)


def _as_2d(Z: NDArray) -> NDArray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[None, :]
    return Z


@dataclass(frozen=True)
class Kernel:
    """Base class holding amplitude and lengthscales.

    Parameters
    ----------
    signal_variance : float
        Kernel value at zero lag; must be positive.
    lengthscales : array_like
        One positive lengthscale per input dimension (a scalar is
        broadcast when the input dimension is known at call time).
    """

    signal_variance: float = 1.0
    lengthscales: NDArray = field(default_factory=lambda: np.array([1.0]))

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if self.signal_variance <= 0:
            raise ValueError("signal_variance must be positive")
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be positive")
        object.__setattr__(self, "lengthscales", ls)

    @property
    def input_dim(self) -> int:
        return self.lengthscales.shape[0]

    def _scaled_dists(self, Za: NDArray, Zb: NDArray) -> NDArray:
        Za, Zb = _as_2d(Za), _as_2d(Zb)
        ls = self.lengthscales
        if ls.shape[0] == 1 and Za.shape[1] > 1:
            ls = np.full(Za.shape[1], ls[0])
        diff = Za[:, None, :] / ls - Zb[None, :, :] / ls
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        return np.sqrt(np.maximum(sq, 0.0))

    def _profile(self, r: NDArray) -> NDArray:
        raise NotImplementedError

    def gram(self, Za: NDArray, Zb: NDArray | None = None) -> NDArray:
        """Kernel matrix between two point sets (rows are points)."""
        Za = _as_2d(Za)
        Zb = Za if Zb is None else _as_2d(Zb)
        if Za.shape[0] == 0 or Zb.shape[0] == 0:
            return np.zeros((Za.shape[0], Zb.shape[0]))
        return self.signal_variance * self._profile(self._scaled_dists(Za, Zb))

    def __call__(self, za: NDArray, zb: NDArray) -> float:
        return float(self.gram(np.atleast_2d(za), np.atleast_2d(zb))[0, 0])

    def diag_value(self) -> float:
        """k(z, z), identical for every z by stationarity."""
        return self.signal_variance


@dataclass(frozen=True)
class SquaredExponential(Kernel):
    """k(r) = signal_variance * exp(-r^2 / 2) with r the scaled distance."""

    def _profile(self, r: NDArray) -> NDArray:
        return np.exp(-0.5 * r * r)


@dataclass(frozen=True)
class Matern(Kernel):
    """Half-integer Matern kernel (nu in {1/2, 3/2, 5/2})."""

    nu: float = 2.5

    def __post_init__(self):
        super().__post_init__()
        if self.nu not in _MATERN_NU:
            raise ValueError(f"nu must be one of {_MATERN_NU}, got {self.nu}")

    def _profile(self, r: NDArray) -> NDArray:
        if self.nu == 0.5:
            return np.exp(-r)
        if self.nu == 1.5:
            s = np.sqrt(3.0) * r
            return (1.0 + s) * np.exp(-s)
        s = np.sqrt(5.0) * r
        return (1.0 + s + s * s / 3.0) * np.exp(-s)


def kernel_from_name(kind: str, signal_variance: float, lengthscales, nu: float = 2.5) -> Kernel:
    """Factory used by config parsing ('se' or 'matern')."""
    kind = kind.strip().lower()
    if kind in ("se", "rbf", "squared-exponential", "squared_exponential"):
        return SquaredExponential(signal_variance, np.atleast_1d(lengthscales))
    if kind == "matern":
        return Matern(signal_variance, np.atleast_1d(lengthscales), nu=nu)
    raise ValueError(f"unknown kernel kind '{kind}'")
