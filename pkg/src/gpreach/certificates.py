"""Sample-count certificates for pathwise GP sampling.

Quantifies how many posterior function samples are needed so that, with
probability at least 1 - delta, at least one is uniformly eps-close to
the unknown function generating the data.  The certificate combines

* a confidence scaling ``beta`` so that |g*(z) - mean(z)| <= sqrt(beta) std(z)
  holds with high probability,
* a data-dependent shift cost bounding half the squared (posterior-RKHS)
  norm of g* - mean (the price of re-centering the small ball on g*),
* an empirically estimated small-ball exponent phi(eps), the negative log
  probability that a centered process path stays inside an eps sup-norm
  ball over a finite evaluation grid.

The required count is then log(delta / 2) / log(1 - exp(-(cost + phi)))
for sub-Gaussian noise; with a hard noise bound the shift cost holds
deterministically and the numerator becomes log(delta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .gp import GpPosterior
from .kernels import _as_2d
from .sampling import grid_draw_factor

MODES = ("subgaussian", "bounded")


class InfeasibleCount(RuntimeError):
    """Raised when the certified count overflows at the requested eps."""

    def __init__(self, exponent: float):
        super().__init__(
            f"required sample count is infeasible at this eps "
            f"(cost + exponent = {exponent:.6g})"
        )
        self.exponent = exponent


def confidence_scaling(gp: GpPosterior, norm_bound: float, delta: float) -> float:
    """Squared confidence factor beta for the |g* - mean| <= sqrt(beta) std bound.

    sqrt(beta) = norm_bound + sqrt(logdet(I + lam^-2 K) + 2 ln(2/delta)).
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    logdet = gp.logdet_whitened()
    root = norm_bound + math.sqrt(max(logdet, 0.0) + 2.0 * math.log(2.0 / delta))
    return root * root


def shift_cost_subgaussian(gp: GpPosterior, norm_bound: float, delta: float) -> float:
    """Shift cost under conditionally sub-Gaussian noise.

    Holds with probability 1 - delta/2; the delta/2 split is accounted
    for in :func:`required_samples` via its log(delta/2) numerator.
    """
    beta = confidence_scaling(gp, norm_bound, delta)
    mu_norm = gp.mean_rkhs_norm()
    if gp.n_points == 0:
        return 0.5 * (norm_bound ** 2 - mu_norm ** 2)
    sigma = gp.training_std()
    lam = gp.noise_scale
    total = (
        norm_bound ** 2
        - mu_norm ** 2
        + 2.0 * math.sqrt(beta) * float(np.abs(gp.alpha) @ sigma)
        + beta / lam ** 2 * float(sigma @ sigma)
    )
    return 0.5 * total


def shift_cost_bounded(gp: GpPosterior, norm_bound: float, noise_bound: float) -> float:
    """Deterministic shift cost when |w_i| <= noise_bound for all data."""
    if noise_bound < 0:
        raise ValueError("noise_bound must be nonnegative")
    mu_norm = gp.mean_rkhs_norm()
    if gp.n_points == 0:
        return 0.5 * (norm_bound ** 2 + mu_norm ** 2)
    y = gp.targets
    mu = gp.mean(gp.inputs)
    a = gp.alpha
    lam = gp.noise_scale
    total = (
        norm_bound ** 2
        + mu_norm ** 2
        - 2.0 * float(a @ y - noise_bound * np.sum(np.abs(a)))
        + float(np.sum((np.abs(y - mu) + noise_bound) ** 2)) / lam ** 2
    )
    return 0.5 * total


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = z / denom * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials))
    return max(center - half, 0.0), min(center + half, 1.0)


@dataclass(frozen=True)
class SmallBallEstimate:
    """Monte Carlo estimate of the small-ball exponent at one eps."""

    eps: float
    exponent: float
    lo: float
    hi: float
    p_hat: float
    draws: int
    censored: bool = False


def estimate_small_ball_exponent(
    gp: GpPosterior,
    eps: float | NDArray,
    grid: NDArray,
    draws: int,
    rng: np.random.Generator,
    center: str = "posterior-mean",
    chunk: int = 4096,
) -> SmallBallEstimate | list[SmallBallEstimate]:
    """Estimate phi(eps) = -ln P(sup-grid |path| <= eps) by Monte Carlo.

    Draws ``draws`` centered paths on the grid, counts the fraction whose
    max absolute value stays within each eps, and maps a Wilson interval
    through -ln.  A zero count is a censored estimate: the exponent falls
    back to ln(draws + 1) and is flagged rather than raised.

    A scalar eps returns one estimate; a sequence returns a list (the
    same draws are reused across all eps values).
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    eps_arr = np.atleast_1d(np.asarray(eps, dtype=float))
    if np.any(eps_arr <= 0):
        raise ValueError("eps must be positive")
    factor = grid_draw_factor(gp, _as_2d(grid), center)
    counts = np.zeros(eps_arr.shape[0], dtype=int)
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        paths = factor @ rng.standard_normal((factor.shape[0], m))
        sup = np.max(np.abs(paths), axis=0)
        counts += (sup[None, :] <= eps_arr[:, None]).sum(axis=1)
        done += m
    out = []
    for e, c in zip(eps_arr, counts):
        lo_p, hi_p = wilson_interval(int(c), draws)
        if c == 0:
            est = SmallBallEstimate(
                eps=float(e), exponent=math.log(draws + 1),
                lo=-math.log(hi_p) if hi_p > 0 else 0.0, hi=math.inf,
                p_hat=0.0, draws=draws, censored=True,
            )
        else:
            p = c / draws
            est = SmallBallEstimate(
                eps=float(e), exponent=-math.log(p),
                lo=-math.log(hi_p),
                hi=-math.log(lo_p) if lo_p > 0 else math.inf,
                p_hat=p, draws=draws, censored=False,
            )
        out.append(est)
    return out[0] if np.isscalar(eps) or np.asarray(eps).ndim == 0 else out


def required_samples(shift_cost: float, exponent: float, delta: float,
                     mode: str = "subgaussian") -> int:
    """Certified sample count from the shift cost and small-ball exponent.

    N = ceil(log(delta/2) / log(1 - e^-(cost + exponent))) in sub-Gaussian
    mode; bounded mode replaces the numerator by log(delta).  Evaluated
    with log1p for stability; overflow raises :class:`InfeasibleCount`.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    total = shift_cost + exponent
    if not total > 0.0:
        raise ValueError("shift_cost + exponent must be positive")
    tail = math.exp(-total)
    if tail == 0.0:
        raise InfeasibleCount(total)
    numerator = math.log(delta / 2.0) if mode == "subgaussian" else math.log(delta)
    denominator = math.log1p(-tail)
    n = numerator / denominator
    if not math.isfinite(n):
        raise InfeasibleCount(total)
    return max(1, math.ceil(n))


def required_samples_vector(shift_costs, exponents, delta: float,
                            mode: str = "subgaussian") -> int:
    """Vector-output certificate: exponents add across output dimensions."""
    costs = np.atleast_1d(np.asarray(shift_costs, dtype=float))
    exps = np.atleast_1d(np.asarray(exponents, dtype=float))
    if costs.shape != exps.shape:
        raise ValueError("need one exponent per output dimension")
    return required_samples(float(np.sum(costs)), float(np.sum(exps)), delta, mode)


def rate_envelope(kernel_kind: str, eps: float, dim: int, scale: float,
                  nu: float | None = None) -> float:
    """Asymptotic envelope e^{phi-bound} for plotting growth curves.

    Squared-exponential kernels use phi <= scale * (log 1/eps)^(1+dim);
    Matern kernels use phi <= scale * (1/eps)^(dim/nu).  The constant
    ``scale`` is kernel-dependent and not certified; the envelope only
    conveys curve shape.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if scale <= 0:
        raise ValueError("scale must be positive")
    kind = kernel_kind.strip().lower()
    if kind in ("se", "rbf", "squared-exponential", "squared_exponential"):
        bound = scale * math.log(1.0 / eps) ** (1 + dim)
    elif kind == "matern":
        if nu is None or nu <= 0:
            raise ValueError("matern envelope needs nu > 0")
        bound = scale * (1.0 / eps) ** (dim / nu)
    else:
        raise ValueError(f"unknown kernel kind '{kernel_kind}'")
    try:
        return math.exp(bound)
    except OverflowError:
        return math.inf


@dataclass(frozen=True)
class CertificateRow:
    eps: float
    estimate: SmallBallEstimate
    count: int | None
    infeasible: bool = False


@dataclass(frozen=True)
class CertificateReport:
    """Everything needed to reproduce one certification run."""

    mode: str
    norm_bound: float
    delta: float
    beta: float
    shift_cost: float
    rows: list[CertificateRow] = field(default_factory=list)

    def count_for(self, eps: float) -> int:
        for row in self.rows:
            if row.eps == eps and row.count is not None:
                return row.count
        raise KeyError(f"no certified count for eps={eps}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "norm_bound": self.norm_bound,
            "delta": self.delta,
            "beta": self.beta,
            "shift_cost": self.shift_cost,
            "rows": [
                {
                    "eps": r.eps,
                    "phi_hat": r.estimate.exponent,
                    "phi_lo": r.estimate.lo,
                    "phi_hi": r.estimate.hi,
                    "p_hat": r.estimate.p_hat,
                    "draws": r.estimate.draws,
                    "censored": r.estimate.censored,
                    "n": r.count,
                    "infeasible": r.infeasible,
                }
                for r in self.rows
            ],
        }


def certify(gps: list[GpPosterior], eps_values, delta: float, norm_bound: float,
            mode: str, grid: NDArray, draws: int, rng: np.random.Generator,
            noise_bound: float | None = None,
            center: str = "posterior-mean") -> CertificateReport:
    """End-to-end certificate over a list of eps values.

    Multi-output models use the vector form: per-dimension shift costs
    and exponents (at the shared eps) are summed in the count formula.
    The reported beta/shift-cost are the per-dimension sums.
    """
    if mode == "bounded":
        if noise_bound is None:
            raise ValueError("bounded mode needs a noise bound")
        costs = [shift_cost_bounded(gp, norm_bound, noise_bound) for gp in gps]
        beta = float("nan")
    else:
        costs = [shift_cost_subgaussian(gp, norm_bound, delta) for gp in gps]
        beta = sum(confidence_scaling(gp, norm_bound, delta) for gp in gps)
    eps_list = [float(e) for e in np.atleast_1d(eps_values)]
    per_dim = [
        estimate_small_ball_exponent(gp, np.asarray(eps_list), grid, draws, rng, center)
        for gp in gps
    ]
    rows = []
    for j, e in enumerate(eps_list):
        ests = [per_dim[i][j] for i in range(len(gps))]
        exps = [est.exponent for est in ests]
        merged = ests[0] if len(ests) == 1 else SmallBallEstimate(
            eps=e, exponent=float(np.sum(exps)),
            lo=float(np.sum([est.lo for est in ests])),
            hi=float(np.sum([est.hi for est in ests])),
            p_hat=float(np.prod([est.p_hat for est in ests])),
            draws=draws, censored=any(est.censored for est in ests),
        )
        try:
            n = required_samples_vector(costs, exps, delta, mode)
            rows.append(CertificateRow(e, merged, n))
        except InfeasibleCount:
            rows.append(CertificateRow(e, merged, None, infeasible=True))
    return CertificateReport(mode, norm_bound, delta, beta, float(np.sum(costs)), rows)


def tensor_grid(lo, hi, points_per_dim: int = 30) -> NDArray:
    """Tensorized evaluation grid over a box (meant for dim <= 2)."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    axes = [np.linspace(a, b, points_per_dim) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def latin_hypercube(lo, hi, n_points: int, rng: np.random.Generator) -> NDArray:
    """Latin-hypercube sample of a box (for input dimension > 2)."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    d = lo.shape[0]
    u = (rng.permuted(np.tile(np.arange(n_points), (d, 1)), axis=1).T
         + rng.uniform(size=(n_points, d))) / n_points
    return lo + u * (hi - lo)


def default_phi_grid(lo, hi, rng: np.random.Generator,
                     points_per_dim: int = 30, lhs_points: int = 1000) -> NDArray:
    """Default sup-norm evaluation grid for the exponent estimator."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    if lo.shape[0] <= 2:
        return tensor_grid(lo, hi, points_per_dim)
    return latin_hypercube(lo, hi, lhs_points, rng)
