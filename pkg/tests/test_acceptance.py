"""End-to-end verification gates.

Each test is one headline guarantee checked at its stated tolerance
against an independent oracle (dense linear algebra, extended-precision
arithmetic, brute-force enumeration, or Monte Carlo simulation of the
constructed ground truth).  Run with ``pytest tests/test_acceptance.py
-v -s`` to see one line per gate with the measured numbers.
"""

import math
import time
from decimal import Decimal, getcontext

import numpy as np
import pytest
from scipy import stats

from gpreach.certificates import (
    estimate_small_ball_exponent,
    required_samples,
    shift_cost_bounded,
    tensor_grid,
)
from gpreach.experiments import (
    car_maneuver_inputs,
    car_setup,
    car_tube_configs,
    pendulum_control_setup,
    pendulum_sample_set,
    pendulum_setup,
    true_dynamics_lipschitz,
)
from gpreach.gp import Dataset, GpPosterior, RkhsFunction
from gpreach.kernels import SquaredExponential
from gpreach.mpc import average_cost, receding_horizon
from gpreach.plants import Box
from gpreach.qp import enumerate_qp_oracle, solve_qp
from gpreach.reachability import (
    LipschitzConfig,
    Metric,
    UncertaintyBudget,
    build_tube,
    baseline_sequential_tube,
    tightenings,
    tube_radii,
)
from gpreach.sampling import draw_samples, grid_draw_factor, sample_functions_on_grid
from gpreach.certificates import confidence_scaling


def report(name: str, detail: str) -> None:
    print(f"\nACCEPTANCE {name}: PASS ({detail})")


# ----------------------------------------------------------------------
# gate 1: GP posterior equals a dense-inverse oracle
# ----------------------------------------------------------------------

def test_gp_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        D = int(rng.integers(1, 51))
        d = int(rng.integers(1, 5))
        kernel = SquaredExponential(float(rng.uniform(0.5, 2.0)),
                                    rng.uniform(0.3, 2.0, size=d))
        Z = rng.uniform(-2, 2, size=(D, d))
        y = rng.normal(size=D)
        lam = float(rng.uniform(0.1, 1.0))
        gp = GpPosterior(kernel, Dataset(Z, y[None, :], noise_scale=lam))
        Zq = rng.uniform(-2, 2, size=(10, d))
        A_inv = np.linalg.inv(kernel.gram(Z) + lam ** 2 * np.eye(D))
        kq = kernel.gram(Z, Zq)
        mean_ref = kq.T @ A_inv @ y
        var_ref = kernel.diag_value() - np.einsum("ij,ik,kj->j", kq, A_inv, kq)
        scale_m = np.maximum(np.abs(mean_ref), 1e-12)
        scale_v = np.maximum(np.abs(var_ref), 1e-12)
        worst = max(worst, float(np.max(np.abs(gp.mean(Zq) - mean_ref) / scale_m)))
        worst = max(worst, float(np.max(np.abs(gp.var(Zq) - np.clip(var_ref, 0, None))
                                        / scale_v)))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-10
    assert elapsed < 10.0
    report("gp-oracle-equivalence", f"worst rel err {worst:.2e}, {elapsed:.1f}s")


# ----------------------------------------------------------------------
# gate 2: certified-count formula against extended precision
# ----------------------------------------------------------------------

def test_sample_count_formula():
    t0 = time.perf_counter()
    assert required_samples(5.0, 0.0, 0.01, "subgaussian") == 784
    assert required_samples(5.0, 0.0, 0.01, "bounded") == 682
    getcontext().prec = 60
    for mode, num in (("subgaussian", Decimal("0.005")), ("bounded", Decimal("0.01"))):
        exact = num.ln() / (Decimal(1) - (-Decimal(5)).exp()).ln()
        assert required_samples(5.0, 0.0, 0.01, mode) == math.ceil(exact)

    # monotone in eps through the analytic single-point exponent
    eps_grid = np.linspace(0.2, 3.0, 20)
    counts_eps = [
        required_samples(1.0, -math.log(2 * stats.norm.cdf(e) - 1), 0.01)
        for e in eps_grid
    ]
    assert all(b <= a for a, b in zip(counts_eps, counts_eps[1:]))
    counts_delta = [required_samples(5.0, 0.0, d) for d in np.linspace(0.001, 0.5, 20)]
    assert all(b <= a for a, b in zip(counts_delta, counts_delta[1:]))
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    report("sample-count-formula", f"784 / 682 exact, sweeps monotone, {elapsed:.2f}s")


# ----------------------------------------------------------------------
# gate 3: small-ball estimator against the Gaussian oracle
# ----------------------------------------------------------------------

def test_small_ball_estimator_sanity():
    t0 = time.perf_counter()
    gp = GpPosterior(SquaredExponential(1.0, [1.0]), Dataset.empty(1, 1.0))
    rng = np.random.default_rng(7)
    est = estimate_small_ball_exponent(gp, 1.96, np.zeros((1, 1)), 100_000, rng,
                                       center="zero-mean-prior")
    truth = -math.log(2 * stats.norm.cdf(1.96) - 1)
    assert est.lo <= truth <= est.hi
    assert abs(est.exponent - 0.0513) < 0.01

    grid = np.linspace(-1, 1, 15)[:, None]
    ests = estimate_small_ball_exponent(gp, np.array([0.6, 1.0, 1.5, 2.2]), grid,
                                        40_000, np.random.default_rng(8))
    for a, b in zip(ests, ests[1:]):
        slack = (a.hi - a.lo) + (b.hi - b.lo)
        assert b.exponent <= a.exponent + slack
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    report("small-ball-estimator",
           f"phi(1.96) = {est.exponent:.4f} vs {truth:.4f}, {elapsed:.1f}s")


# ----------------------------------------------------------------------
# gate 4: closeness coverage of the certified count
# ----------------------------------------------------------------------

def test_closeness_coverage():
    t0 = time.perf_counter()
    kernel = SquaredExponential(1.0, [0.4])
    centers = np.linspace(-1, 1, 5)[:, None]
    g_star = RkhsFunction(kernel, centers, np.array([0.5, -0.3, 0.4, 0.2, -0.4]))
    norm_bound = g_star.rkhs_norm() * 1.02

    rng = np.random.default_rng(10)
    Z = rng.uniform(-1, 1, size=(10, 1))
    w_bar = 0.01
    y = g_star(Z) + rng.uniform(-w_bar, w_bar, size=10)
    gp = GpPosterior(kernel, Dataset(Z, y[None, :], noise_scale=3 * w_bar))

    grid = np.linspace(-1, 1, 60)[:, None]
    delta, eps = 0.1, 0.25
    cost = shift_cost_bounded(gp, norm_bound, w_bar)
    est = estimate_small_ball_exponent(gp, eps, grid, 40_000, np.random.default_rng(11))
    n = required_samples(cost, est.hi, delta, "bounded")
    assert n <= 500

    gap = g_star(grid) - gp.mean(grid)
    factor = grid_draw_factor(gp, grid, "posterior-mean")
    reps, hits = 200, 0
    draw_rng = np.random.default_rng(12)
    for _ in range(reps):
        centered = sample_functions_on_grid(gp, grid, "posterior-mean", n, draw_rng,
                                            factor=factor)
        hits += bool(np.any(np.max(np.abs(centered - gap[:, None]), axis=0) <= eps))
    coverage = hits / reps
    # one-sided binomial slack at ~3 sigma for p = 1 - delta over 200 reps
    slack = 3.0 * math.sqrt(delta * (1 - delta) / reps)
    elapsed = time.perf_counter() - t0
    assert coverage >= (1 - delta) - slack
    assert elapsed < 300.0
    report("closeness-coverage",
           f"N = {n}, coverage {coverage:.3f} >= {1 - delta - slack:.3f}, {elapsed:.0f}s")


# ----------------------------------------------------------------------
# shared pendulum scenario at desk scale (delta = 0.1)
# ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_pendulum():
    setup = pendulum_setup(seed=0, eps=6e-3, delta=0.1)
    grid = tensor_grid(setup.model.gp_box.lo, setup.model.gp_box.hi, 25)
    cost = shift_cost_bounded(setup.gps[0], setup.norm_bound, setup.noise_bound)
    est = estimate_small_ball_exponent(setup.gps[0], setup.eps, grid, 20_000,
                                       np.random.default_rng(5))
    n = required_samples(cost, est.hi, setup.delta, "bounded")
    return setup, n


def test_tube_containment(desk_pendulum):
    t0 = time.perf_counter()
    setup, n = desk_pendulum
    assert n <= 500, f"desk-scale certificate should be small, got {n}"
    metric = Metric.euclidean()
    lip = true_dynamics_lipschitz(setup.model, setup.g_star, metric,
                                  points_per_dim=9, inflation=1.02)
    lcfg = LipschitzConfig(lip, metric=metric)
    budget = UncertaintyBudget.from_matrix(setup.model.bd(np.zeros(2)), setup.eps,
                                           setup.noise_bound, metric)
    H = 30
    radii = tube_radii(lcfg, budget, H)
    for k in range(H):
        assert radii[k + 1] == pytest.approx(lcfg.constant * radii[k] + budget.eps_bar,
                                             rel=1e-12)

    x0 = np.array([2.3, 0.4])
    rng = np.random.default_rng(6)
    inputs = rng.uniform(-0.4, 0.4, size=(H, 1))
    samples = draw_samples(setup.gps, n, master_seed=77)
    tube = build_tube(samples, setup.plant, x0, inputs, lcfg, budget)
    reps, hits = 200, 0
    for _ in range(reps):
        truth = setup.plant.rollout(x0, inputs)
        hits += tube.contains_trajectory(truth, slack=1e-9)
    coverage = hits / reps
    slack = 3.0 * math.sqrt(setup.delta * (1 - setup.delta) / reps)
    elapsed = time.perf_counter() - t0
    assert coverage >= (1 - setup.delta) - slack
    assert elapsed < 300.0
    report("tube-containment",
           f"N = {n}, coverage {coverage:.3f}, radii recursion exact, {elapsed:.0f}s")


# ----------------------------------------------------------------------
# gate 6: candidate-shift deviations against the tightening bounds
# ----------------------------------------------------------------------

def test_tightening_lemma_oracle():
    t0 = time.perf_counter()
    setup = pendulum_setup(seed=1)
    model = setup.model
    eps, w_bar = setup.eps, setup.noise_bound
    g_star = setup.g_star[0]

    def close_fn(Z):
        Z = np.atleast_2d(Z)
        return g_star(Z) + 0.9 * eps * np.cos(3.0 * Z[:, 0])

    # Lipschitz constant over an inflated box covering every visited state
    big_box = Box(model.state_box.lo - 0.5, model.state_box.hi + 0.5)
    metric = Metric.euclidean()
    lip = 0.0
    for x in big_box.grid(9):
        for u in model.input_box.grid(5):
            z = model.gp_input(x, u)

            def step(xx):
                zz = model.gp_input(xx, u)[None, :]
                return model.f(xx, u) + model.bd(xx) @ np.array(
                    [g_star(zz)[0] + 0.9 * eps * np.cos(3.0 * zz[0, 0])])

            J = np.zeros((2, 2))
            base = step(x)
            for j in range(2):
                dx = np.zeros(2)
                dx[j] = 1e-6
                J[:, j] = (step(x + dx) - base) / 1e-6
            lip = max(lip, metric.matrix_norm(J))
    lcfg = LipschitzConfig(lip * 1.001, metric=metric)
    budget = UncertaintyBudget.from_matrix(model.bd(np.zeros(2)), eps, w_bar, metric)
    H = 6
    c, _ = tightenings(lcfg, budget, H)

    rng = np.random.default_rng(13)
    violations = 0
    for _ in range(1000):
        x_k = rng.uniform(model.state_box.lo + 0.3, model.state_box.hi - 0.3)
        us = rng.uniform(model.input_box.lo, model.input_box.hi, size=(H, 1))
        w = rng.uniform(-w_bar, w_bar)
        # prediction with the close sample from x(k)
        pred = [x_k.copy()]
        for i in range(H):
            z = model.gp_input(pred[-1], us[i])
            pred.append(model.f(pred[-1], us[i])
                        + model.bd(pred[-1]) @ np.array([close_fn(z[None, :])[0]]))
        # true next state, then the shifted candidate
        z0 = model.gp_input(x_k, us[0])
        x_next = model.f(x_k, us[0]) + model.bd(x_k) @ np.array(
            [g_star(z0[None, :])[0] + w])
        cand = [x_next]
        for i in range(H - 1):
            z = model.gp_input(cand[-1], us[i + 1])
            cand.append(model.f(cand[-1], us[i + 1])
                        + model.bd(cand[-1]) @ np.array([close_fn(z[None, :])[0]]))
        for i in range(H):
            if i < len(cand):
                if metric.norm(cand[i] - pred[i + 1]) > c[i] + 1e-12:
                    violations += 1
                    break
    elapsed = time.perf_counter() - t0
    assert violations == 0
    assert elapsed < 60.0
    report("tightening-lemma", f"0 violations in 1000 trials, L = {lip:.4f}, {elapsed:.0f}s")


# ----------------------------------------------------------------------
# gate 7: falsification never removes the close sample; feasibility soak
# ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def soak_control_setup():
    # the benchmark closeness scale, where initial feasibility is certified
    setup = pendulum_setup(seed=0)
    return pendulum_control_setup(setup, horizon=16)


def test_falsification_safety_soak(soak_control_setup):
    t0 = time.perf_counter()
    setup = soak_control_setup
    runs, T = 20, 100
    feasible_runs = 0
    x0 = np.array([2.15, 2.3])
    for run in range(runs):
        sset = pendulum_sample_set(setup, 12, master_seed=1000 + run, plant_close=True)
        log = receding_horizon(setup.ocp, setup.plant, x0, T, sset,
                               lcfg=setup.lipschitz, budget=setup.budget)
        assert -1 in sset.active, f"close sample removed in run {run}"
        counts = log.n_active
        assert all(b <= a for a, b in zip(counts, counts[1:]))
        if log.halted is None:
            feasible_runs += 1
            assert log.constraints_ok(setup.model.state_box, setup.model.input_box)
    frac = feasible_runs / runs
    slack = 3.0 * math.sqrt(max(setup.delta * (1 - setup.delta) / runs, 1e-6))
    elapsed = time.perf_counter() - t0
    assert frac >= (1 - setup.delta) - slack
    assert elapsed < 1200.0
    report("falsification-safety",
           f"{feasible_runs}/{runs} fully feasible, close sample kept, {elapsed:.0f}s")


# ----------------------------------------------------------------------
# gate 8: pendulum headline (certified count and stabilization)
# ----------------------------------------------------------------------

def test_pendulum_headline():
    t0 = time.perf_counter()
    setup = pendulum_setup(seed=0)  # eps 2e-3, delta 1e-3, w_bar 1e-4, 36 data
    grid = tensor_grid(setup.model.gp_box.lo, setup.model.gp_box.hi, 30)
    cost = shift_cost_bounded(setup.gps[0], setup.norm_bound, setup.noise_bound)
    est = estimate_small_ball_exponent(setup.gps[0], setup.eps, grid, 30_000,
                                       np.random.default_rng(21))
    n = required_samples(cost, est.exponent, setup.delta, "bounded")
    assert 35 <= n <= 140, f"certified count {n} outside a factor 2 of 70"

    setup = pendulum_control_setup(setup, horizon=20)
    sset = pendulum_sample_set(setup, n, master_seed=5, cap=140)
    T = 110
    log = receding_horizon(setup.ocp, setup.plant, np.array([2.15, 2.3]), T, sset,
                           lcfg=setup.lipschitz, budget=setup.budget)
    assert log.halted is None, log.halted
    term = setup.terminal
    tail = [term.distance(x) for x in log.states[-20:]]
    elapsed = time.perf_counter() - t0
    assert all(d <= term.level for d in tail)
    report("pendulum-headline",
           f"N = {n}, final distance {tail[-1]:.2f} <= level {term.level:.2f}, "
           f"{elapsed:.0f}s")


# ----------------------------------------------------------------------
# gate 9: sequential baseline shape on the car
# ----------------------------------------------------------------------

def test_baseline_comparison_shape():
    t0 = time.perf_counter()
    setup = car_setup(seed=0)
    lcfg, base_lcfg, budget = car_tube_configs(setup, speed_cap=6.0)
    inputs = car_maneuver_inputs(20)
    x0 = np.array([0.0, 0.0, 0.0, 5.0])
    samples = draw_samples(setup.gps, 40, master_seed=3)
    tube = build_tube(samples, setup.plant, x0, inputs, lcfg, budget)
    betas = [confidence_scaling(gp, setup.norm_bound, setup.delta)
             for gp in setup.gps]
    base = baseline_sequential_tube(setup.gps, setup.plant, x0, inputs, base_lcfg,
                                    betas, setup.noise_bound,
                                    rng=np.random.default_rng(4))
    crossing = np.flatnonzero(base[1:] > tube.radii[1:]) + 1
    assert crossing.size and crossing[0] <= 14
    ratios = base[2:] / base[1:-1]
    assert np.all(np.abs(ratios[-4:] / base_lcfg.constant - 1.0) < 0.05)
    elapsed = time.perf_counter() - t0
    report("baseline-shape",
           f"baseline exceeds from k = {crossing[0]}, ratio -> "
           f"{ratios[-1]:.4f} vs L = {base_lcfg.constant:.4f}, {elapsed:.0f}s")


# ----------------------------------------------------------------------
# gate 10: closed-loop average cost against the decrease constants
# ----------------------------------------------------------------------

def test_performance_bound(soak_control_setup):
    t0 = time.perf_counter()
    setup = soak_control_setup
    T = 300
    bounds = []
    for seed in (0, 1, 2):
        sset = pendulum_sample_set(setup, 10, master_seed=3000 + seed,
                                   plant_close=True)
        log = receding_horizon(setup.ocp, setup.plant, np.array([2.15, 2.3]), T,
                               sset, lcfg=setup.lipschitz, budget=setup.budget)
        if log.halted is not None:
            continue
        avg = average_cost(log)
        assert log.decrease_bound is not None
        assert avg <= log.decrease_bound, (avg, log.decrease_bound)
        bounds.append((avg, log.decrease_bound))
    elapsed = time.perf_counter() - t0
    assert bounds, "no feasible run completed"
    report("performance-bound",
           f"{len(bounds)} runs, worst avg {max(a for a, _ in bounds):.3f} <= "
           f"bound {bounds[0][1]:.3f}, {elapsed:.0f}s")


# ----------------------------------------------------------------------
# gate 11: QP subsolver and SQP stationarity
# ----------------------------------------------------------------------

def test_qp_sqp_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    checked = 0
    for _ in range(500):
        n = int(rng.integers(1, 31))
        m_in = int(rng.integers(0, 9))
        m_eq = int(rng.integers(0, min(3, n)))
        Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        G = Q @ np.diag(np.exp(rng.uniform(0, np.log(100), size=n))) @ Q.T
        a = rng.normal(size=n)
        A_eq = rng.normal(size=(m_eq, n)) if m_eq else None
        b_eq = rng.normal(size=m_eq) * 0.3 if m_eq else None
        A_in = rng.normal(size=(m_in, n)) if m_in else None
        b_in = (A_in @ (rng.normal(size=n) * 0.2)
                + rng.uniform(0.02, 1.0, size=m_in)) if m_in else None
        try:
            want = enumerate_qp_oracle(G, a, A_eq, b_eq, A_in, b_in)
        except Exception:
            continue
        got = solve_qp(G, a, A_eq, b_eq, A_in, b_in)
        assert np.allclose(got.x, want, atol=1e-6)
        checked += 1
    assert checked >= 450

    # SQP stationarity on a converged nonlinear solve
    from gpreach.mpc import SampleSet, solve_ocp
    from tests.test_mpc import Integrator1D, scalar_cfg, zero_dynamics

    cfg = scalar_cfg(horizon=4, q=0.7, level=6.0,
                     input_rows=Integrator1D.input_box.halfspaces())
    sol = solve_ocp(cfg, SampleSet({0: zero_dynamics()}), np.array([3.0]),
                    plant=Integrator1D(), iterations=30)
    assert sol.status == "converged"
    assert sol.kkt_residual <= 1e-6
    elapsed = time.perf_counter() - t0
    report("qp-sqp-correctness",
           f"{checked} QP instances matched, SQP KKT {sol.kkt_residual:.1e}, "
           f"{elapsed:.0f}s")
