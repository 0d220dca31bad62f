import numpy as np
import pytest

from gpreach.gp import GpPosterior
from gpreach.kernels import SquaredExponential
from gpreach.mpc import (
    CertificateViolated,
    FixedDynamics,
    OcpConfig,
    OcpInfeasible,
    RunLog,
    SampleSet,
    average_cost,
    committed_rollout,
    cost_decrease_constants,
    cost_lipschitz_constants,
    decrease_diagnostic,
    receding_horizon,
    solve_ocp,
    update_sample_set,
)
from gpreach.plants import Box, TruePlant, fit_rkhs_ground_truth, pendulum_model, training_dataset
from gpreach.reachability import LipschitzConfig, Metric, UncertaintyBudget, tightenings
from gpreach.terminal import TerminalIngredients


class Integrator1D:
    """x+ = x + u + g with the projection on the full state."""

    n_x, n_u, n_g = 1, 1, 1
    state_box = Box([-10.0], [10.0])
    input_box = Box([-4.0], [4.0])

    def f(self, x, u):
        return np.array([x[0] + u[0]])

    def bd(self, x):
        return np.array([[1.0]])

    def gp_input(self, x, u):
        return np.array([x[0], u[0]])

    def step(self, x, u):
        return self.f(x, u)  # noise-free true plant with g = 0


def zero_dynamics():
    return FixedDynamics(lambda z: np.zeros(1), input_dim=2, n_outputs=1)


def const_dynamics(c):
    return FixedDynamics(lambda z: np.array([c]), input_dim=2, n_outputs=1)


def scalar_terminal(level=1.0, pf=1.0):
    """Terminal interval {|x| <= level} with cost pf x^2."""
    return TerminalIngredients(
        cost_matrix=np.array([[pf]]), gain=np.zeros((1, 1)), x_eq=np.zeros(1),
        u_eq=np.zeros(1), level=level * np.sqrt(pf), contraction=0.5, offset=0.0,
    )


def scalar_cfg(horizon=1, q=0.0, r=1.0, level=1.0, pf=1.0, state_rows=None,
               input_rows=None, deviations=None, sqp_iterations=8, **kw):
    H = horizon
    dev = np.zeros(H) if deviations is None else np.asarray(deviations, dtype=float)
    delta = np.concatenate([[0.0], np.cumsum(dev)[:-1]])
    delta[~np.isfinite(delta)] = 0.0
    return OcpConfig(
        horizon=H, Q=np.array([[q]]), R=np.array([[r]]), x_ref=np.zeros(1),
        u_ref=np.zeros(1), terminal=scalar_terminal(level, pf), deviations=dev,
        tightenings=delta, state_rows=state_rows, input_rows=input_rows,
        sqp_iterations=sqp_iterations, initial_iterations=12, **kw,
    )


class TestSolveOcp:
    def test_terminal_bound_active_matches_grid_oracle(self):
        """min u^2 s.t. x+ = x + u, |x+| <= 1, from x = 2: u* = -1."""
        cfg = scalar_cfg(pf=1e-12)
        sset = SampleSet({0: zero_dynamics()})
        sol = solve_ocp(cfg, sset, np.array([2.0]), plant=Integrator1D(),
                        iterations=10)
        # brute-force oracle over the input grid
        grid = np.linspace(-4, 4, 20001)
        feas = grid[np.abs(2.0 + grid) <= 1.0]
        oracle = feas[np.argmin(feas ** 2)]
        assert sol.inputs[0, 0] == pytest.approx(oracle, abs=1e-6)
        assert sol.inputs[0, 0] == pytest.approx(-1.0, abs=1e-6)

    def test_stationary_at_reference(self):
        cfg = scalar_cfg(q=1.0, level=5.0)
        sset = SampleSet({0: zero_dynamics()})
        sol = solve_ocp(cfg, sset, np.zeros(1), plant=Integrator1D(), iterations=6)
        assert abs(sol.inputs[0, 0]) < 1e-9
        assert sol.objective == pytest.approx(0.0, abs=1e-12)

    def test_opposing_drifts_steered_jointly(self):
        """Two samples drifting apart share one input; both must satisfy a
        tight terminal interval, which forces the midpoint compromise."""
        cfg = scalar_cfg(horizon=2, q=0.0, r=1.0, level=1.0, pf=1e-12)
        drift = 0.3
        sset = SampleSet({0: const_dynamics(drift), 1: const_dynamics(-drift)})
        x0 = np.array([2.0])
        sol = solve_ocp(cfg, sset, x0, plant=Integrator1D(), iterations=20)

        # grid-search oracle over two shared inputs (cost summed per sample)
        grid = np.linspace(-4, 4, 801)
        best, best_u = np.inf, None
        for u0 in grid:
            for u1 in grid:
                xa = 2.0 + u0 + drift + u1 + drift
                xb = 2.0 + u0 - drift + u1 - drift
                if abs(xa) <= 1.0 and abs(xb) <= 1.0:
                    cost = 2 * (u0 ** 2 + u1 ** 2)
                    if cost < best:
                        best, best_u = cost, (u0, u1)
        assert best_u is not None
        assert sol.inputs[0, 0] == pytest.approx(best_u[0], abs=2e-2)
        assert sol.inputs[0, 0] == pytest.approx(-0.8, abs=1e-4)
        # predicted trajectories both satisfy the terminal interval
        for n in (0, 1):
            assert abs(sol.states[n][2, 0]) <= 1.0 + 1e-6

    def test_shared_input_structure(self):
        cfg = scalar_cfg(horizon=3, level=10.0)
        sset = SampleSet({i: const_dynamics(0.05 * i) for i in range(4)})
        sol = solve_ocp(cfg, sset, np.array([1.0]), plant=Integrator1D(),
                        iterations=5)
        assert sol.inputs.shape == (3, 1)
        assert len(sol.states) == 4

    def test_converged_kkt_residual(self):
        cfg = scalar_cfg(horizon=3, q=0.5, level=10.0,
                         input_rows=Integrator1D.input_box.halfspaces())
        sset = SampleSet({0: zero_dynamics()})
        sol = solve_ocp(cfg, sset, np.array([3.0]), plant=Integrator1D(),
                        iterations=25)
        assert sol.status == "converged"
        assert sol.kkt_residual <= 1e-6

    def test_infeasible_current_state(self):
        cfg = scalar_cfg(state_rows=(np.array([[1.0]]), np.array([1.0])))
        sset = SampleSet({0: zero_dynamics()})
        with pytest.raises(OcpInfeasible):
            solve_ocp(cfg, sset, np.array([5.0]), plant=Integrator1D())

    def test_infeasible_conflicting_rows(self):
        # terminal requires |x+| <= 1 but inputs cannot reach it in one step
        cfg = scalar_cfg(input_rows=(np.vstack([np.eye(1), -np.eye(1)]),
                                     np.array([0.1, 0.1])))
        sset = SampleSet({0: zero_dynamics()})
        with pytest.raises(OcpInfeasible) as err:
            solve_ocp(cfg, sset, np.array([5.0]), plant=Integrator1D(), iterations=4)
        assert err.value.violated


class TestUpdateSampleSet:
    def run_solution(self, cfg, sset, x0, plant):
        sol = solve_ocp(cfg, sset, x0, plant=plant, iterations=8)
        sol.predicted = {
            n: committed_rollout(plant, s, cfg, x0, sol.inputs)
            for n, s in sset.active_samples()
        }
        return sol

    def test_infinite_bounds_keep_everything(self):
        solve_cfg = scalar_cfg(horizon=2, level=10.0)
        plant = Integrator1D()
        sset = SampleSet({0: const_dynamics(0.2), 1: const_dynamics(-0.4)})
        sol = self.run_solution(solve_cfg, sset, np.array([1.0]), plant)
        # the update itself sees infinite deviation bounds
        update_cfg = scalar_cfg(horizon=2, level=10.0, deviations=[np.inf, np.inf])
        x_next = plant.step(np.array([1.0]), sol.inputs[0]) + 5.0
        update_sample_set(sset, sol, x_next, update_cfg, plant, time_k=0)
        assert sset.active == [0, 1]
        assert sset.removals == []

    def test_constructed_violation_removed_with_stage_logged(self):
        cfg = scalar_cfg(horizon=2, level=10.0, deviations=[0.1, 0.1])
        plant = Integrator1D()
        # sample 1 drifts by 0.3 per step, so its stage-0 prediction is
        # 0.3 away from sample 0's; starting the candidate at sample 0's
        # prediction violates c_0 = 0.1 for sample 1 only
        sset = SampleSet({0: zero_dynamics(), 1: const_dynamics(0.3)})
        sol = self.run_solution(cfg, sset, np.array([1.0]), plant)
        x_next = sol.predicted[0][1]
        update_sample_set(sset, sol, x_next, cfg, plant, time_k=3)
        assert sset.active == [0]
        assert [r.index for r in sset.removals] == [1]
        assert sset.removals[0].stage == 0
        assert sset.removals[0].time == 3
        assert sset.removals[0].deviation == pytest.approx(0.3, abs=1e-9)

    def test_empty_set_flagged(self):
        cfg = scalar_cfg(horizon=1, level=10.0, deviations=[1e-12])
        plant = Integrator1D()
        sset = SampleSet({0: const_dynamics(0.5)})
        sol = self.run_solution(cfg, sset, np.array([0.0]), plant)
        with pytest.raises(CertificateViolated):
            update_sample_set(sset, sol, sol.predicted[0][1] + 1.0, cfg, plant, 0)

    def test_close_sample_survives_50_steps(self):
        """A sample within eps of the truth is never falsified when the
        deviation bounds come from the tightening recursion."""
        model, ref = pendulum_model()
        eps, w_bar = 2e-3, 1e-4
        kernel = SquaredExponential(0.01, [1.2, 6.0])
        g_star, _ = fit_rkhs_ground_truth(ref, kernel, model.gp_box.grid(9), norm_cap=5.0)
        plant = TruePlant(model, g_star, w_bar, np.random.default_rng(0))

        close = FixedDynamics(
            lambda z: np.atleast_1d(g_star(z[None, :])[0] + 0.9 * eps * np.cos(3 * z[0])),
            input_dim=2, n_outputs=1,
        )
        lip = LipschitzConfig(1.03)
        budget = UncertaintyBudget.scalar(eps, w_bar, 1.0)
        H = 8
        c, delta = tightenings(lip, budget, H)
        term = TerminalIngredients(np.eye(2), np.zeros((1, 2)), np.array([np.pi, 0.0]),
                                   np.zeros(1), level=50.0, contraction=0.9, offset=0.0)
        cfg = OcpConfig(horizon=H, Q=np.diag([4.0, 0.5]), R=np.eye(1) * 0.05,
                        x_ref=np.array([np.pi, 0.0]), u_ref=np.zeros(1),
                        terminal=term, deviations=c, tightenings=delta,
                        input_rows=model.input_box.halfspaces(),
                        sqp_iterations=1, initial_iterations=10)
        sset = SampleSet({-1: close})
        x = np.array([2.6, 0.8])
        warm = None
        for k in range(50):
            sol = solve_ocp(cfg, sset, x, warm=warm, plant=model,
                            iterations=10 if k == 0 else 1)
            sol.predicted = {-1: committed_rollout(model, close, cfg, x, sol.inputs)}
            u = sol.realized_first_input(cfg, x)
            x = plant.step(x, u)
            update_sample_set(sset, sol, x, cfg, model, k)
            warm = sol
        assert sset.active == [-1]
        assert sset.removals == []


class TestRecedingHorizon:
    def make_nominal(self):
        plant = Integrator1D()
        cfg = scalar_cfg(horizon=3, q=1.0, r=1.0, level=3.0,
                         input_rows=plant.input_box.halfspaces(),
                         state_rows=plant.state_box.halfspaces())
        sset = SampleSet({0: zero_dynamics()})
        return plant, cfg, sset

    def test_zero_steps_logs_initial_solve_only(self):
        plant, cfg, sset = self.make_nominal()
        log = receding_horizon(cfg, plant, np.array([2.0]), 0, sset)
        assert len(log.states) == 1
        assert log.steps == 0
        assert log.feasible == [True]
        with pytest.raises(ValueError):
            average_cost(log)

    def test_nominal_closed_loop_matches_prediction(self):
        plant, cfg, sset = self.make_nominal()
        log = receding_horizon(cfg, plant, np.array([2.0]), 6, sset,
                               record_predictions=True)
        assert log.halted is None
        for k in range(log.steps):
            predicted_next = log.predictions[k][0][1]
            assert np.allclose(log.states[k + 1], predicted_next, atol=1e-8)

    def test_monotone_sample_count(self):
        plant = Integrator1D()
        cfg = scalar_cfg(horizon=2, q=1.0, level=5.0, deviations=[0.05, 0.05],
                         input_rows=plant.input_box.halfspaces())
        sset = SampleSet({0: zero_dynamics(), 1: const_dynamics(0.2),
                          2: const_dynamics(-0.15)})
        log = receding_horizon(cfg, plant, np.array([1.0]), 5, sset)
        counts = log.n_active
        assert all(b <= a for a, b in zip(counts, counts[1:]))

    def test_average_cost_single_step(self):
        plant, cfg, sset = self.make_nominal()
        log = receding_horizon(cfg, plant, np.array([2.0]), 1, sset)
        assert average_cost(log) == pytest.approx(log.stage_costs[0])

    def test_infeasible_run_halts_with_reason(self):
        plant = Integrator1D()
        cfg = scalar_cfg(state_rows=(np.array([[1.0]]), np.array([1.0])))
        sset = SampleSet({0: zero_dynamics()})
        log = receding_horizon(cfg, plant, np.array([5.0]), 3, sset)
        assert log.halted is not None and "infeasible" in log.halted
        assert log.feasible[-1] is False


class TestDecreaseConstants:
    def test_identity_with_tightening_sum(self):
        """K1 w + K2 eps equals L_l sum c_i + L_f c_{H-1} (scalar case)."""
        lip = LipschitzConfig(1.1)
        budget = UncertaintyBudget.scalar(0.01, 0.002, 1.3)
        H = 6
        c, _ = tightenings(lip, budget, H)
        l_stage, l_term = 2.0, 5.0
        k1, k2, l_c = cost_decrease_constants(l_stage, l_term, lip, budget, H)
        direct = l_stage * float(np.sum(c[:H - 1])) + l_term * c[H - 1]
        assert l_c == pytest.approx(direct, rel=1e-12)
        assert k1 * 0.002 + k2 * 0.01 == pytest.approx(l_c, rel=1e-12)

    def test_cost_lipschitz_on_box(self):
        cfg = scalar_cfg(q=2.0, level=1.0)
        l_stage, l_term = cost_lipschitz_constants(cfg, Box([-3.0], [3.0]))
        assert l_stage == pytest.approx(2 * 2.0 * 3.0)
        assert l_term == pytest.approx(2 * 1.0 * 3.0)
