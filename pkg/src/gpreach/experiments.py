"""Prebuilt experiment setups for the pendulum and car studies.

Collects the glue between plants, GP models, certificates, reachability
and the controller so demos, the command-line pipelines, and the
verification suite share one construction.  Values quoted from the
benchmark descriptions (geometry, sampling time, data meshes, noise
bound) are fixed here; kernel hyperparameters, cost weights, and
constraint boxes are implementation choices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq

from .certificates import (
    CertificateReport,
    certify,
    confidence_scaling,
    default_phi_grid,
)
from .gp import GpPosterior, RkhsFunction, multi_output_posteriors
from .kernels import SquaredExponential
from .mpc import OcpConfig, SampleSet, FixedDynamics
from .plants import (
    KnownModel,
    TruePlant,
    car_model,
    fit_vector_ground_truth,
    pendulum_model,
    training_dataset,
)
from .reachability import LipschitzConfig, Metric, UncertaintyBudget, tightenings
from .terminal import TerminalIngredients, synthesize_terminal


@dataclass
class ExperimentSetup:
    """Everything a pipeline needs to run one scenario."""

    model: KnownModel
    plant: TruePlant
    g_star: list[RkhsFunction]
    norm_bound: float
    gps: list[GpPosterior]
    eps: float
    delta: float
    noise_bound: float
    terminal: TerminalIngredients | None = None
    lipschitz: LipschitzConfig | None = None
    budget: UncertaintyBudget | None = None
    ocp: OcpConfig | None = None
    extras: dict = field(default_factory=dict)

    def certificate(self, draws: int, rng: np.random.Generator,
                    eps_values=None, mode: str = "bounded",
                    points_per_dim: int = 30) -> CertificateReport:
        grid = default_phi_grid(self.model.gp_box.lo, self.model.gp_box.hi, rng,
                                points_per_dim=points_per_dim)
        eps_values = [self.eps] if eps_values is None else eps_values
        return certify(self.gps, eps_values, self.delta, self.norm_bound, mode,
                       grid, draws, rng, noise_bound=self.noise_bound)

    def close_surrogate(self, margin: float = 0.9) -> FixedDynamics:
        """A known dynamics within ``margin * eps`` of the ground truth.

        Planting it in a sample set makes 'the eps-close sample' a
        concrete, identifiable object for falsification diagnostics.
        """
        fns = self.g_star
        eps = self.eps * margin

        def fn(z):
            base = np.array([f(z[None, :])[0] for f in fns])
            return base + eps * np.cos(3.0 * z[0])

        return FixedDynamics(fn, self.model.gp_input_dim, len(fns))


def estimate_gp_lipschitz(model: KnownModel, gps, beta: float, metric: Metric,
                          feedback: NDArray | None = None, points_per_dim: int = 7,
                          inflation: float = 1.10, fd_step: float = 1e-5) -> float:
    """Lipschitz estimate of the closed-loop learned dynamics in a metric.

    Maximizes the state Jacobian norm of f + B_d (mean +/- sqrt(beta) std)
    over a grid of the state and input boxes; the envelope signs bound the
    admissible function band.  Certified runs should pass an externally
    validated constant instead.
    """
    xs = model.state_box.grid(points_per_dim)
    us = model.input_box.grid(max(points_per_dim - 2, 2))
    worst = 0.0

    def step(x, u_cmd, sign):
        u = u_cmd if feedback is None else feedback @ x + u_cmd
        z = model.gp_input(x, u)[None, :]
        g = np.array([gp.mean(z)[0] + sign * np.sqrt(beta) * gp.std(z)[0] for gp in gps])
        return model.f(x, u) + model.bd(x) @ g

    n_x = model.n_x
    for x in xs:
        for u in us:
            for sign in (0.0, 1.0, -1.0):
                J = np.zeros((n_x, n_x))
                base = step(x, u, sign)
                for j in range(n_x):
                    d = np.zeros(n_x)
                    d[j] = fd_step
                    J[:, j] = (step(x + d, u, sign) - base) / fd_step
                worst = max(worst, metric.matrix_norm(J))
    return worst * inflation


def true_dynamics_lipschitz(model: KnownModel, g_star, metric: Metric,
                            feedback: NDArray | None = None,
                            points_per_dim: int = 7, inflation: float = 1.10,
                            fd_step: float = 1e-6) -> float:
    """Lipschitz constant of the known ground-truth (closed-loop) map.

    The verification scenarios construct their own ground truth, so the
    constant required of the true dynamics can be computed from it
    directly: the grid maximum over admissible states and realized
    inputs of the norm of A + B K (state plus feedback-channel
    Jacobian), inflated by a safety factor.
    """
    xs = model.state_box.grid(points_per_dim)
    us = model.input_box.grid(max(points_per_dim - 2, 2))
    fns = g_star if isinstance(g_star, (list, tuple)) else [g_star]

    def step(x, u):
        z = model.gp_input(x, u)[None, :]
        g = np.array([fn(z)[0] for fn in fns])
        return model.f(x, u) + model.bd(x) @ g

    n_x, n_u = model.n_x, model.n_u
    worst = 0.0
    for x in xs:
        for u in us:
            base = step(x, u)
            A = np.zeros((n_x, n_x))
            for j in range(n_x):
                d = np.zeros(n_x)
                d[j] = fd_step
                A[:, j] = (step(x + d, u) - base) / fd_step
            if feedback is not None:
                B = np.zeros((n_x, n_u))
                for j in range(n_u):
                    d = np.zeros(n_u)
                    d[j] = fd_step
                    B[:, j] = (step(x, u + d) - base) / fd_step
                A = A + B @ feedback
            worst = max(worst, metric.matrix_norm(A))
    return worst * inflation


def pendulum_setup(noise_bound: float = 1e-4, noise_scale: float = 7e-4,
                   eps: float = 2e-3, delta: float = 1e-3, seed: int = 0,
                   signal_variance: float = 0.05,
                   lengthscales=(1.2, 6.0)) -> ExperimentSetup:
    """Pendulum scenario: 36 mesh data points, stabilization at upright."""
    model, reference = pendulum_model(length=10.0, dt=0.015)
    kernel = SquaredExponential(signal_variance, np.asarray(lengthscales))
    g_star, _ = fit_vector_ground_truth(reference, kernel, model.gp_box.grid(9),
                                        norm_cap=50.0, n_outputs=1)
    norm_bound = g_star[0].rkhs_norm()
    plant = TruePlant(model, g_star, noise_bound, np.random.default_rng(seed))
    dataset = training_dataset(plant, (4, 9), noise_scale=noise_scale)
    gps = multi_output_posteriors(kernel, dataset)
    return ExperimentSetup(model=model, plant=plant, g_star=g_star,
                           norm_bound=norm_bound, gps=gps, eps=eps, delta=delta,
                           noise_bound=noise_bound)


def pendulum_equilibrium_input(setup: ExperimentSetup) -> float:
    """Input holding the mean dynamics at the upright state."""
    x_eq = np.array([np.pi, 0.0])
    gp = setup.gps[0]

    def drift(u):
        z = setup.model.gp_input(x_eq, np.array([u]))[None, :]
        return gp.mean(z)[0]

    return brentq(drift, -2.0, 2.0, xtol=1e-13)


def pendulum_control_setup(setup: ExperimentSetup, horizon: int = 20,
                           terminal_seed: int = 101, n_lin: int = 100,
                           q_weights=(6.0, 1.0), r_weight: float = 0.3,
                           riccati_weights=((20.0, 1.0), 1.0),
                           commit_resolution: float = 0.03,
                           max_fantasies: int = 1200) -> ExperimentSetup:
    """Attach terminal ingredients, tightenings, and the OCP config.

    The tube metric is the terminal cost metric with the terminal
    feedback applied in prediction; the Lipschitz constant is estimated
    on a grid and inflated.
    """
    model = setup.model
    x_eq = np.array([np.pi, 0.0])
    u_eq = np.array([pendulum_equilibrium_input(setup)])
    Q = np.diag(np.asarray(q_weights, dtype=float))
    R = np.eye(1) * r_weight

    # preliminary tightening scale for the synthesis (refined below)
    pre_budget = UncertaintyBudget.from_matrix(model.bd(x_eq), setup.eps,
                                               setup.noise_bound)
    pre_lcfg = LipschitzConfig(1.03)
    c_pre, delta_pre = tightenings(pre_lcfg, pre_budget, horizon)

    terminal = synthesize_terminal(
        setup.gps, model, x_eq, u_eq, Q=Q, R=R, n_lin=n_lin,
        rng_seed=terminal_seed, c_terminal=float(c_pre[-1]),
        delta_terminal=float(delta_pre[-1]),
        riccati_Q=np.diag(np.asarray(riccati_weights[0], dtype=float)),
        riccati_R=np.eye(1) * riccati_weights[1],
        state_rows=model.state_box.halfspaces(),
        input_rows=model.input_box.halfspaces(),
    )

    metric = terminal.metric()
    beta = confidence_scaling(setup.gps[0], setup.norm_bound, setup.delta)
    # dense grid with a small inflation: a contractive constant keeps the
    # tightening sums bounded, which a blanket 10% margin would destroy
    lip = true_dynamics_lipschitz(model, setup.g_star, metric,
                                  feedback=terminal.gain, points_per_dim=12,
                                  inflation=1.02)
    lcfg = LipschitzConfig(lip, metric=metric, feedback=terminal.gain)
    budget = UncertaintyBudget.from_matrix(model.bd(x_eq), setup.eps,
                                           setup.noise_bound, metric)
    c, deltas = tightenings(lcfg, budget, horizon)

    ocp = OcpConfig(
        horizon=horizon, Q=Q, R=R, x_ref=x_eq, u_ref=u_eq, terminal=terminal,
        deviations=c, tightenings=deltas,
        state_rows=model.state_box.halfspaces(),
        input_rows=model.input_box.halfspaces(),
        metric=metric, use_feedback=True,
        sqp_iterations=1, initial_iterations=30,
    )
    setup.terminal = terminal
    setup.lipschitz = lcfg
    setup.budget = budget
    setup.ocp = ocp
    setup.extras.update(beta=beta, commit_resolution=commit_resolution,
                        max_fantasies=max_fantasies, x_eq=x_eq, u_eq=u_eq)
    return setup


def pendulum_sample_set(setup: ExperimentSetup, n: int, master_seed: int,
                        plant_close: bool = False, cap: int = 100) -> SampleSet:
    planted = setup.close_surrogate() if plant_close else None
    return SampleSet.draw(
        setup.gps, n, master_seed,
        commit_resolution=setup.extras.get("commit_resolution", 0.0),
        max_fantasies=setup.extras.get("max_fantasies"),
        cap=cap, planted=planted,
    )


def car_setup(noise_bound: float = 1e-6, noise_scale: float = 2e-4,
              eps: float = 8e-4, delta: float = 0.01, seed: int = 0,
              signal_variance: float = 0.05,
              lengthscales=(2.0, 1.0)) -> ExperimentSetup:
    """Car scenario: 45 mesh data points (noise-free), evasive maneuver."""
    model, reference = car_model(l_f=1.105, l_r=1.738, dt=0.06)
    kernel = SquaredExponential(signal_variance, np.asarray(lengthscales))
    g_star, _ = fit_vector_ground_truth(reference, kernel, model.gp_box.grid(7),
                                        norm_cap=50.0, n_outputs=3)
    norm_bound = max(fn.rkhs_norm() for fn in g_star)
    plant = TruePlant(model, g_star, noise_bound, np.random.default_rng(seed))
    dataset = training_dataset(plant, (5, 9), noise_scale=noise_scale)
    gps = multi_output_posteriors(kernel, dataset)
    return ExperimentSetup(model=model, plant=plant, g_star=g_star,
                           norm_bound=norm_bound, gps=gps, eps=eps, delta=delta,
                           noise_bound=noise_bound)


def car_maneuver_inputs(horizon: int = 51) -> NDArray:
    """Stored lane-change input sequence (steer, accel) for the tube study."""
    ks = np.arange(horizon)
    steer = 0.38 * np.sin(2.0 * np.pi * ks / 34.0) * (ks < 34)
    accel = np.where(ks < 10, 0.6, 0.0)
    return np.stack([steer, accel], axis=1)


def car_tube_configs(setup: ExperimentSetup, lipschitz: float | None = None,
                     baseline_lipschitz: float | None = None,
                     speed_cap: float | None = None):
    """Lipschitz configs and budget for the car tube comparison.

    Both the sampling tube and the baseline propagate in the Euclidean
    norm with the ground truth's own Lipschitz constant over the
    admissible region (computable here because the scenario constructs
    its truth); ``speed_cap`` bounds the projection column norms.
    """
    model = setup.model
    metric = Metric.euclidean()
    if lipschitz is None:
        lipschitz = true_dynamics_lipschitz(model, setup.g_star, metric,
                                            points_per_dim=5, inflation=1.02)
    if baseline_lipschitz is None:
        baseline_lipschitz = lipschitz
    v_max = model.state_box.hi[3] if speed_cap is None else speed_cap
    lcfg = LipschitzConfig(lipschitz, metric=metric)
    budget = UncertaintyBudget.from_matrix(
        model.bd(np.array([0, 0, 0, v_max])),
        setup.eps, setup.noise_bound, metric)
    base_lcfg = LipschitzConfig(baseline_lipschitz, metric=metric)
    return lcfg, base_lcfg, budget
