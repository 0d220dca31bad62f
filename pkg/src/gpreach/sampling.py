"""Pathwise sampling of dynamics functions from a GP posterior.

A sampled function is realized lazily: every queried input gets a value
drawn from the normal law conditioned on the base data plus all values
drawn so far (fantasy re-conditioning).  Once drawn, a value is stored,
so re-querying the same input returns it exactly -- a sampled function
is a function.

Fantasies are conditioned with a tiny jitter rather than the data noise,
because a pathwise sample is noise-free; the measurement-noise scale
applies only to the real data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import solve_triangular

from .gp import FactorizationError, GpPosterior, chol_with_jitter
from .kernels import _as_2d

#: Inputs closer than this (Euclidean) are treated as the same point.
POINT_IDENTITY_TOL = 1e-12

#: Diagonal jitter used when conditioning on drawn (noise-free) values.
FANTASY_JITTER = 1e-10


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream derived from (master seed, index).

    Streams with distinct indices are statistically independent; equal
    pairs reproduce bit-identical sequences.
    """

    master_seed: int
    index: int = 0

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("stream index must be nonnegative")

    def generator(self) -> np.random.Generator:
        seed = np.random.SeedSequence([self.master_seed & ((1 << 64) - 1), self.index])
        return np.random.default_rng(seed)

    def child(self, index: int) -> "RngStream":
        return RngStream(self.master_seed, index)


class _DimState:
    """Growing Cholesky factor and whitened targets for one output dim."""

    __slots__ = ("chol", "white", "size", "alpha", "alpha_dirty")

    def __init__(self, base: GpPosterior, capacity: int):
        D = base.n_points
        self.size = D
        self.chol = np.zeros((capacity, capacity))
        self.white = np.zeros(capacity)
        if D:
            self.chol[:D, :D] = base.chol
            self.white[:D] = base.whitened_targets
        self.alpha: NDArray | None = None
        self.alpha_dirty = True

    def grow(self, capacity: int) -> None:
        chol = np.zeros((capacity, capacity))
        white = np.zeros(capacity)
        m = self.size
        chol[:m, :m] = self.chol[:m, :m]
        white[:m] = self.white[:m]
        self.chol = chol
        self.white = white

    def coefficients(self) -> NDArray:
        """alpha = L^-T (L^-1 y) for the current conditioning set."""
        if self.alpha_dirty or self.alpha is None:
            m = self.size
            if m:
                self.alpha = solve_triangular(
                    self.chol[:m, :m].T, self.white[:m], lower=False
                )
            else:
                self.alpha = np.zeros(0)
            self.alpha_dirty = False
        return self.alpha


class SampledDynamics:
    """One pathwise sample of a (possibly vector-valued) GP posterior.

    Parameters
    ----------
    posteriors : list of GpPosterior
        One per output dimension, sharing the same training inputs.
    stream : RngStream
        Deterministic source of the draws; each sample owns its stream.
    commit_resolution : float
        If positive, a query closer than this to an already committed
        point is answered with the conditional mean instead of drawing a
        new value.  Keeps the conditioning set (and cost) bounded while
        leaving the realized function fixed at that resolution; 0 means
        every new input is drawn and committed.
    max_fantasies : int or None
        Hard cap on committed points; once reached, queries fall back to
        the conditional mean.
    """

    def __init__(self, posteriors: list[GpPosterior], stream: RngStream,
                 commit_resolution: float = 0.0, max_fantasies: int | None = None,
                 fantasy_jitter: float = FANTASY_JITTER):
        if not posteriors:
            raise ValueError("need at least one output dimension")
        dims = {gp.input_dim for gp in posteriors}
        if len(dims) != 1:
            raise ValueError("all output dimensions must share the input space")
        counts = {gp.n_points for gp in posteriors}
        if len(counts) != 1:
            raise ValueError("all output dimensions must share the training inputs")
        self.posteriors = posteriors
        self.stream = stream
        self.rng = stream.generator()
        self.commit_resolution = float(commit_resolution)
        self.max_fantasies = max_fantasies
        self.fantasy_jitter = float(fantasy_jitter)
        self.input_dim = posteriors[0].input_dim
        self.n_outputs = len(posteriors)
        D = posteriors[0].n_points
        cap = D + 64
        self._states = [_DimState(gp, cap) for gp in posteriors]
        self._points = np.zeros((cap, self.input_dim))
        if D:
            self._points[:D] = posteriors[0].inputs
        self._n_base = D
        self._n_total = D
        self._fantasy_values: list[NDArray] = []

    # -- bookkeeping ----------------------------------------------------

    @property
    def n_fantasies(self) -> int:
        return self._n_total - self._n_base

    @property
    def fantasy_inputs(self) -> NDArray:
        return self._points[self._n_base:self._n_total].copy()

    def _ensure_capacity(self):
        if self._n_total == self._points.shape[0]:
            cap = self._points.shape[0] * 2
            pts = np.zeros((cap, self.input_dim))
            pts[: self._n_total] = self._points[: self._n_total]
            self._points = pts
            for st in self._states:
                st.grow(cap)

    def _nearest_fantasy(self, z: NDArray) -> tuple[int, float]:
        """Index (into the fantasy list) and distance of the closest fantasy."""
        n0, n1 = self._n_base, self._n_total
        if n1 == n0:
            return -1, np.inf
        diff = self._points[n0:n1] - z
        d2 = np.einsum("ij,ij->i", diff, diff)
        i = int(np.argmin(d2))
        return i, float(np.sqrt(d2[i]))

    # -- evaluation -----------------------------------------------------

    def _cross_vec(self, gp_index: int, z: NDArray) -> NDArray:
        gp = self.posteriors[gp_index]
        return gp.kernel.gram(self._points[: self._n_total], z[None, :])[:, 0]

    def conditional(self, z: NDArray) -> tuple[NDArray, NDArray]:
        """Mean and variance per output dim given data plus fantasies."""
        z = np.asarray(z, dtype=float).ravel()
        if z.shape[0] != self.input_dim:
            raise ValueError("query dimension mismatch")
        means = np.zeros(self.n_outputs)
        variances = np.zeros(self.n_outputs)
        m = self._n_total
        for j, (gp, st) in enumerate(zip(self.posteriors, self._states)):
            prior = gp.kernel.diag_value()
            if m == 0:
                means[j], variances[j] = 0.0, prior
                continue
            kv = self._cross_vec(j, z)
            ell = solve_triangular(st.chol[:m, :m], kv, lower=True)
            means[j] = ell @ st.white[:m]
            variances[j] = min(max(prior - ell @ ell, 0.0), prior)
        return means, variances

    def mean_at(self, Z: NDArray) -> NDArray:
        """Conditional mean on a batch of points, shape (m, n_outputs).

        This is the fixed smooth surrogate for the realized function
        between committed points; it never draws or commits.
        """
        Z = _as_2d(Z)
        if Z.shape[1] != self.input_dim:
            raise ValueError("query dimension mismatch")
        out = np.zeros((Z.shape[0], self.n_outputs))
        m = self._n_total
        if m == 0:
            return out
        for j, (gp, st) in enumerate(zip(self.posteriors, self._states)):
            Kq = gp.kernel.gram(Z, self._points[:m])
            out[:, j] = Kq @ st.coefficients()
        return out

    def _commit(self, z: NDArray, values: NDArray) -> None:
        self._ensure_capacity()
        m = self._n_total
        for j, (gp, st) in enumerate(zip(self.posteriors, self._states)):
            prior = gp.kernel.diag_value()
            if m:
                kv = self._cross_vec(j, z)
                ell = solve_triangular(st.chol[:m, :m], kv, lower=True)
                pred = ell @ st.white[:m]
                resid = prior + self.fantasy_jitter - ell @ ell
            else:
                ell = np.zeros(0)
                pred = 0.0
                resid = prior + self.fantasy_jitter
            if resid <= 0:
                if resid < -1e-6 * prior:
                    raise FactorizationError(
                        "degenerate fantasy geometry while re-conditioning"
                    )
                resid = self.fantasy_jitter
            root = np.sqrt(resid)
            st.chol[m, :m] = ell
            st.chol[m, m] = root
            st.white[m] = (values[j] - pred) / root
            st.size = m + 1
            st.alpha_dirty = True
        self._points[m] = z
        self._n_total = m + 1
        self._fantasy_values.append(values.copy())

    def sample_at(self, z: NDArray) -> NDArray:
        """Value of the realized function at ``z``, drawing if needed.

        A query within ``POINT_IDENTITY_TOL`` of a committed input
        returns the stored value unchanged.  Otherwise each output
        dimension draws from its conditional normal law and the pair
        (input, values) is committed, unless the commit policy defers to
        the conditional mean (see ``commit_resolution``).
        """
        z = np.asarray(z, dtype=float).ravel()
        if z.shape[0] != self.input_dim:
            raise ValueError("query dimension mismatch")
        idx, dist = self._nearest_fantasy(z)
        if dist <= POINT_IDENTITY_TOL:
            return self._fantasy_values[idx].copy()
        budget_full = (self.max_fantasies is not None
                       and self.n_fantasies >= self.max_fantasies)
        if budget_full or (0.0 < self.commit_resolution and dist <= self.commit_resolution):
            means, _ = self.conditional(z)
            return means
        means, variances = self.conditional(z)
        noise = self.rng.standard_normal(self.n_outputs)
        values = means + np.sqrt(variances) * noise
        self._commit(z, values)
        return values

    def __call__(self, z: NDArray) -> NDArray:
        return self.sample_at(z)


def draw_samples(posteriors: list[GpPosterior], n_samples: int, master_seed: int,
                 commit_resolution: float = 0.0, max_fantasies: int | None = None,
                 index_offset: int = 0) -> list[SampledDynamics]:
    """Independent pathwise samples with per-sample deterministic streams."""
    return [
        SampledDynamics(posteriors, RngStream(master_seed, index_offset + n),
                        commit_resolution=commit_resolution,
                        max_fantasies=max_fantasies)
        for n in range(n_samples)
    ]


def grid_draw_factor(gp: GpPosterior, grid: NDArray, center: str = "posterior-mean"):
    """Cholesky factor of the process covariance on a finite grid.

    center='posterior-mean' factors the posterior kernel; 'zero-mean-prior'
    factors the prior kernel.  Shared by the batched draw below.
    """
    grid = _as_2d(grid)
    if grid.shape[0] == 0:
        raise ValueError("grid must be non-empty")
    if center == "posterior-mean":
        C = gp.cov_matrix(grid)
    elif center == "zero-mean-prior":
        C = gp.kernel.gram(grid)
    else:
        raise ValueError("center must be 'posterior-mean' or 'zero-mean-prior'")
    # trace-relative jitter escalation keeps a vanishing signal variance exact
    scale = max(float(np.max(np.diag(C))), 0.0)
    L, _ = chol_with_jitter(C + 1e-12 * scale * np.eye(grid.shape[0]))
    return L


def sample_functions_on_grid(gp: GpPosterior, grid: NDArray, center: str,
                             n_draws: int, rng: np.random.Generator,
                             factor: NDArray | None = None) -> NDArray:
    """Joint draws of the (prior or posterior) process on a grid.

    Returns an (n_grid, n_draws) array of values already centered (the
    chosen mean subtracted), so a sup norm can be taken directly.
    """
    L = grid_draw_factor(gp, grid, center) if factor is None else factor
    return L @ rng.standard_normal((L.shape[0], n_draws))


def sample_function_on_grid(gp: GpPosterior, grid: NDArray, center: str,
                            stream: RngStream) -> NDArray:
    """Single centered draw of the process on a grid (values, shape (m,))."""
    rng = stream.generator()
    return sample_functions_on_grid(gp, grid, center, 1, rng)[:, 0]


def rollout_sample(sample, plant, x0: NDArray, inputs: NDArray,
                   feedback: NDArray | None = None) -> NDArray:
    """Propagate one sampled dynamics through the plant's known part.

    x_{k+1} = f(x_k, u_k) + B_d(x_k) g^n(z(x_k, u_k)), with u_k the given
    input (plus linear state feedback ``u = K x + v`` when provided).
    Returns the (H+1, n_x) state sequence.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.size == 0:
        return x0[None, :].copy()
    if inputs.shape[1] != plant.n_u:
        inputs = inputs.reshape(-1, plant.n_u)
    H = inputs.shape[0]
    out = np.zeros((H + 1, x0.shape[0]))
    out[0] = x0
    for k in range(H):
        u = inputs[k] if feedback is None else feedback @ out[k] + inputs[k]
        z = plant.gp_input(out[k], u)
        g = sample.sample_at(z)
        out[k + 1] = plant.f(out[k], u) + plant.bd(out[k]) @ g
        if not np.all(np.isfinite(out[k + 1])):
            raise FloatingPointError(f"rollout diverged to a non-finite state at step {k}")
    return out
