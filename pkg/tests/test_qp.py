import numpy as np
import pytest

from gpreach.qp import QpInfeasible, enumerate_qp_oracle, solve_qp


def random_spd(n, rng, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eigs = np.exp(rng.uniform(0, np.log(cond), size=n))
    return Q @ np.diag(eigs) @ Q.T


class TestUnconstrained:
    def test_matches_linear_solve(self):
        rng = np.random.default_rng(0)
        G = random_spd(6, rng)
        a = rng.normal(size=6)
        sol = solve_qp(G, a)
        assert np.allclose(sol.x, np.linalg.solve(G, -a), atol=1e-10)
        assert sol.active == []


class TestEqualityOnly:
    def test_single_equality(self):
        G = np.eye(2)
        a = np.zeros(2)
        sol = solve_qp(G, a, A_eq=np.array([[1.0, 1.0]]), b_eq=np.array([2.0]))
        assert np.allclose(sol.x, [1.0, 1.0], atol=1e-10)

    def test_kkt_via_multipliers(self):
        rng = np.random.default_rng(1)
        G = random_spd(5, rng)
        a = rng.normal(size=5)
        A_eq = rng.normal(size=(2, 5))
        b_eq = rng.normal(size=2)
        sol = solve_qp(G, a, A_eq=A_eq, b_eq=b_eq)
        assert np.allclose(A_eq @ sol.x, b_eq, atol=1e-9)
        assert sol.stationarity_residual(G, a, A_eq, None) < 1e-8


class TestInequalities:
    def test_inactive_constraints_ignored(self):
        G = np.eye(2)
        a = np.array([-2.0, 0.0])  # unconstrained optimum (2, 0)
        sol = solve_qp(G, a, A_in=np.array([[1.0, 0.0]]), b_in=np.array([5.0]))
        assert np.allclose(sol.x, [2.0, 0.0], atol=1e-10)

    def test_active_bound(self):
        G = np.eye(1)
        a = np.array([2.0])  # unconstrained optimum -2
        sol = solve_qp(G, a, A_in=np.array([[-1.0]]), b_in=np.array([1.0]))  # -x <= 1
        assert sol.x[0] == pytest.approx(-1.0, abs=1e-10)
        assert sol.multipliers[0] == pytest.approx(1.0, abs=1e-8)

    def test_box_projection(self):
        # min ||x - p||^2 onto the unit box
        p = np.array([2.0, -3.0, 0.4])
        G = 2 * np.eye(3)
        a = -2 * p
        A_in = np.vstack([np.eye(3), -np.eye(3)])
        b_in = np.ones(6)
        sol = solve_qp(G, a, A_in=A_in, b_in=b_in)
        assert np.allclose(sol.x, np.clip(p, -1, 1), atol=1e-9)

    def test_mixed_equality_inequality(self):
        # min x^2 + y^2 s.t. x + y = 1, y <= 0.2
        sol = solve_qp(np.eye(2), np.zeros(2),
                       A_eq=np.array([[1.0, 1.0]]), b_eq=np.array([1.0]),
                       A_in=np.array([[0.0, 1.0]]), b_in=np.array([0.2]))
        assert np.allclose(sol.x, [0.8, 0.2], atol=1e-9)


class TestInfeasibility:
    def test_contradictory_inequalities(self):
        with pytest.raises(QpInfeasible):
            solve_qp(np.eye(1), np.zeros(1),
                     A_in=np.array([[1.0], [-1.0]]), b_in=np.array([-1.0, -1.0]))

    def test_equality_vs_inequality(self):
        with pytest.raises(QpInfeasible) as err:
            solve_qp(np.eye(2), np.zeros(2),
                     A_eq=np.array([[1.0, 0.0]]), b_eq=np.array([2.0]),
                     A_in=np.array([[1.0, 0.0]]), b_in=np.array([1.0]))
        assert len(err.value.violated) >= 1


class TestAgainstEnumeration:
    @pytest.mark.parametrize("seed", range(30))
    def test_random_instances(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 31))
        m_in = int(rng.integers(0, 9))
        m_eq = int(rng.integers(0, min(3, n)))
        G = random_spd(n, rng, cond=50.0)
        a = rng.normal(size=n)
        A_eq = rng.normal(size=(m_eq, n)) if m_eq else None
        b_eq = rng.normal(size=m_eq) * 0.3 if m_eq else None
        A_in = rng.normal(size=(m_in, n)) if m_in else None
        # keep feasible with high probability: offset around a feasible point
        if m_in:
            x_feas = rng.normal(size=n) * 0.2
            b_in = A_in @ x_feas + rng.uniform(0.05, 1.0, size=m_in)
        else:
            b_in = None
        try:
            want = enumerate_qp_oracle(G, a, A_eq, b_eq, A_in, b_in)
        except QpInfeasible:
            with pytest.raises(QpInfeasible):
                solve_qp(G, a, A_eq, b_eq, A_in, b_in)
            return
        got = solve_qp(G, a, A_eq, b_eq, A_in, b_in)
        assert np.allclose(got.x, want, atol=1e-6), f"seed {seed}"

    def test_stationarity_contract(self):
        rng = np.random.default_rng(99)
        for _ in range(20):
            n = int(rng.integers(2, 20))
            G = random_spd(n, rng)
            a = rng.normal(size=n)
            A_in = rng.normal(size=(6, n))
            b_in = A_in @ (rng.normal(size=n) * 0.1) + rng.uniform(0.1, 1, size=6)
            sol = solve_qp(G, a, A_in=A_in, b_in=b_in)
            assert sol.stationarity_residual(G, a, None, A_in) < 1e-8
            assert np.all(A_in @ sol.x - b_in <= 1e-8)
            assert np.all(sol.multipliers >= -1e-10)
            # complementarity
            slack = b_in - A_in @ sol.x
            assert np.max(np.abs(sol.multipliers * slack)) < 1e-6
