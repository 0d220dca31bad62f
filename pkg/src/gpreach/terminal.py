"""Terminal set, cost, and controller synthesis from sampled dynamics.

A quadratic terminal cost V_f(x) = ||x - x_eq||^2_{P_f} with a linear
terminal controller u = u_eq + K_f (x - x_eq) is synthesized by

1. solving a discrete Riccati equation on the mean linearization,
2. verifying that the closed loop of every sampled linearization is a
   contraction in the resulting P-norm (common quadratic certificate),
3. scaling P so the certified decrease dominates the stage cost, and
4. shrinking the terminal level until boundary states stay inside the
   tightened set under every sampled nonlinear dynamics.

The decrease offset l_s absorbs the residual slack measured on the
validation states, so the certified inequality
V_f(x+) - V_f(x) <= -l(x, u_f(x)) + l_s holds on everything checked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import eigh, solve_discrete_are

from .reachability import Metric


class TerminalSynthesisError(RuntimeError):
    def __init__(self, message: str, worst_sample: int | None = None):
        if worst_sample is not None:
            message += f" (worst sample index {worst_sample})"
        super().__init__(message)
        self.worst_sample = worst_sample


@dataclass(frozen=True)
class TerminalIngredients:
    """Verified terminal set {||x - x_eq||_{P_f} <= level} and its law."""

    cost_matrix: NDArray  # P_f
    gain: NDArray  # K_f
    x_eq: NDArray
    u_eq: NDArray
    level: float  # rho
    contraction: float  # certified closed-loop contraction in the P_f norm
    offset: float  # l_s

    def metric(self) -> Metric:
        return Metric.weighted(self.cost_matrix)

    def u_law(self, x: NDArray) -> NDArray:
        return self.u_eq + self.gain @ (np.asarray(x, dtype=float).ravel() - self.x_eq)

    def cost(self, x: NDArray) -> float:
        d = np.asarray(x, dtype=float).ravel() - self.x_eq
        return float(d @ self.cost_matrix @ d)

    def distance(self, x: NDArray) -> float:
        return float(np.sqrt(max(self.cost(x), 0.0)))

    def contains(self, x: NDArray, shrink: float = 0.0, slack: float = 1e-12) -> bool:
        return self.distance(x) <= self.level - shrink + slack


def fd_jacobians(step, x: NDArray, u: NDArray, h: float = 1e-3):
    """Central finite-difference Jacobians of x+ = step(x, u)."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    n_x, n_u = x.shape[0], u.shape[0]
    A = np.zeros((n_x, n_x))
    B = np.zeros((n_x, n_u))
    for j in range(n_x):
        d = np.zeros(n_x)
        d[j] = h
        A[:, j] = (step(x + d, u) - step(x - d, u)) / (2 * h)
    for j in range(n_u):
        d = np.zeros(n_u)
        d[j] = h
        B[:, j] = (step(x, u + d) - step(x, u - d)) / (2 * h)
    return A, B


def _sample_step(plant, sample):
    def step(x, u):
        z = plant.gp_input(x, u)
        return plant.f(x, u) + plant.bd(x) @ np.atleast_1d(sample.sample_at(z))
    return step


def _mean_step(plant, gps):
    def step(x, u):
        z = plant.gp_input(x, u)[None, :]
        g = np.array([gp.mean(z)[0] for gp in gps])
        return plant.f(x, u) + plant.bd(x) @ g
    return step


def synthesize_terminal(gps, plant, x_eq: NDArray, u_eq: NDArray, Q: NDArray,
                        R: NDArray, n_lin: int, rng_seed: int,
                        c_terminal: float = 0.0, delta_terminal: float = 0.0,
                        state_rows: tuple[NDArray, NDArray] | None = None,
                        input_rows: tuple[NDArray, NDArray] | None = None,
                        tube_metric: Metric | None = None,
                        margin: float = 0.05, fd_step: float = 1e-3,
                        sample_fd_step: float = 0.05,
                        riccati_Q: NDArray | None = None,
                        riccati_R: NDArray | None = None,
                        boundary_points: int = 24, max_shrink: int = 60,
                        equilibrium_tol: float = 1e-6,
                        samples=None) -> TerminalIngredients:
    """Common quadratic terminal certificate over sampled dynamics.

    Parameters
    ----------
    gps : per-output-dimension posteriors (the mean model).
    plant : object exposing f, bd, gp_input (a KnownModel or TruePlant).
    n_lin : number of fresh dynamics samples to linearize and verify.
    c_terminal, delta_terminal : tightening of the terminal set and of the
        state box that terminal states must respect.
    state_rows, input_rows : halfspace forms (A, b) of the boxes; omitted
        rows are not enforced.
    tube_metric : metric of the tightening balls (defaults to the P_f
        metric itself).
    riccati_Q, riccati_R : design weights for the Riccati equation when
        they should differ from the certified stage cost (Q, R).
    sample_fd_step : FD baseline for the sampled paths; a baseline at the
        scale of the terminal region captures the sample's behavior there
        rather than sub-resolution path roughness.
    samples : pre-drawn dynamics samples to verify against (drawn fresh
        from ``rng_seed`` when omitted).

    Raises ``TerminalSynthesisError`` when no common certificate exists
    or the level shrinks away entirely.
    """
    from .sampling import draw_samples

    x_eq = np.asarray(x_eq, dtype=float).ravel()
    u_eq = np.asarray(u_eq, dtype=float).ravel()
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    Qd = Q if riccati_Q is None else np.atleast_2d(np.asarray(riccati_Q, dtype=float))
    Rd = R if riccati_R is None else np.atleast_2d(np.asarray(riccati_R, dtype=float))
    n_x = x_eq.shape[0]

    mean_step = _mean_step(plant, gps)
    drift = mean_step(x_eq, u_eq) - x_eq
    if np.linalg.norm(drift) > equilibrium_tol:
        raise TerminalSynthesisError(
            f"(x_eq, u_eq) is not an equilibrium of the mean dynamics "
            f"(drift norm {np.linalg.norm(drift):.3e})"
        )

    A_mean, B_mean = fd_jacobians(mean_step, x_eq, u_eq, fd_step)
    P = solve_discrete_are(A_mean, B_mean, Qd, Rd)
    P = 0.5 * (P + P.T)
    gain = -np.linalg.solve(Rd + B_mean.T @ P @ B_mean, B_mean.T @ P @ A_mean)

    if samples is None:
        samples = draw_samples(gps, n_lin, master_seed=rng_seed)
    lin = []
    for s in samples:
        A_n, B_n = fd_jacobians(_sample_step(plant, s), x_eq, u_eq, sample_fd_step)
        lin.append(A_n + B_n @ gain)
    lin.append(A_mean + B_mean @ gain)

    p_metric = Metric.weighted(P)
    factors = np.array([p_metric.matrix_norm(M) for M in lin])
    contraction = float(np.max(factors))
    if contraction >= 1.0 - 1e-9:
        raise TerminalSynthesisError(
            f"no common Lyapunov certificate found (contraction {contraction:.4f})",
            worst_sample=int(np.argmax(factors[:-1])) if len(factors) > 1 else None,
        )

    # scale P so the decrease dominates the stage cost with a margin
    stage = Q + gain.T @ R @ gain
    gen = eigh(stage, P, eigvals_only=True)
    scale = float(np.max(gen)) / (1.0 - contraction ** 2) * (1.0 + margin)
    P_f = max(scale, 1e-12) * P
    terminal_metric = Metric.weighted(P_f)
    ball_metric = tube_metric if tube_metric is not None else terminal_metric

    # largest level respecting the tightened state box and the input box
    level = np.inf
    if state_rows is not None:
        A_x, b_x = state_rows
        for a_row, b_val in zip(np.atleast_2d(A_x), np.atleast_1d(b_x)):
            room = b_val - ball_metric.dual_norm(a_row) * delta_terminal - a_row @ x_eq
            denom = terminal_metric.dual_norm(a_row)
            if denom > 1e-12:
                level = min(level, room / denom)
    if input_rows is not None:
        A_u, b_u = input_rows
        for a_row, b_val in zip(np.atleast_2d(A_u), np.atleast_1d(b_u)):
            room = b_val - a_row @ u_eq
            denom = terminal_metric.dual_norm(gain.T @ a_row)
            if denom > 1e-12:
                level = min(level, room / denom)
    if not np.isfinite(level):
        level = 1.0
    if level <= 0:
        raise TerminalSynthesisError("terminal set has no room inside the tightened box")

    # tightening expressed in the terminal metric
    kappa = 1.0
    if tube_metric is not None:
        gen = eigh(P_f, tube_metric.mat(n_x), eigvals_only=True)
        kappa = float(np.sqrt(np.max(gen)))
    shrink = c_terminal * kappa

    rng = np.random.default_rng(rng_seed + 1)
    dirs = terminal_metric.unit_sphere(boundary_points, n_x, rng)

    def invariant_at(rho: float) -> tuple[bool, int | None]:
        if rho <= shrink:
            return False, None
        boundary = x_eq + rho * dirs
        for idx, s in enumerate(samples):
            for x in boundary:
                u = u_eq + gain @ (x - x_eq)
                z = plant.gp_input(x, u)
                nxt = plant.f(x, u) + plant.bd(x) @ np.atleast_1d(s.sample_at(z))
                if terminal_metric.norm(nxt - x_eq) > rho - shrink:
                    return False, idx
        return True, None

    worst = None
    for _ in range(max_shrink):
        ok, worst = invariant_at(level)
        if ok:
            break
        level *= 0.85
    else:
        raise TerminalSynthesisError(
            "tightened invariance failed at every level tried", worst_sample=worst
        )

    # measured decrease offset over boundary and interior validation states
    validation = np.vstack([x_eq + level * dirs, x_eq + 0.5 * level * dirs, x_eq[None, :]])
    offset = 0.0
    for s in samples:
        for x in validation:
            u = u_eq + gain @ (x - x_eq)
            z = plant.gp_input(x, u)
            nxt = plant.f(x, u) + plant.bd(x) @ np.atleast_1d(s.sample_at(z))
            dx, dn = x - x_eq, nxt - x_eq
            v_now = dx @ P_f @ dx
            v_next = dn @ P_f @ dn
            stage_cost = dx @ Q @ dx + (u - u_eq) @ R @ (u - u_eq)
            offset = max(offset, v_next - v_now + stage_cost)

    return TerminalIngredients(
        cost_matrix=P_f, gain=gain, x_eq=x_eq, u_eq=u_eq,
        level=float(level), contraction=contraction, offset=float(max(offset, 0.0)),
    )


def verify_decrease_linear(M: NDArray, P_f: NDArray, stage: NDArray,
                           margin: float = 0.0) -> float:
    """Largest eigenvalue of M'PM - P + (1-margin) stage (<= 0 certifies)."""
    S = M.T @ P_f @ M - P_f + (1.0 - margin) * stage
    return float(np.max(np.linalg.eigvalsh(0.5 * (S + S.T))))
