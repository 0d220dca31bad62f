"""Sampling-based robust MPC with falsification of dynamics samples.

One optimal control problem is solved over a shared input sequence and
one predicted trajectory per retained dynamics sample; state constraints
are tightened by the cumulative deviation bounds, and all trajectories
must end in a tightened terminal set.  After applying the first input,
samples whose shifted-candidate propagation deviates from their previous
prediction by more than the per-step bound c_i are removed, which keeps
the eps-close sample with high probability and restores feasibility of
the shifted candidate.

The solver is an SQP on the multiple-shooting formulation: sampled
dynamics are evaluated through each sample's fantasy-conditioned mean (a
fixed smooth function during one solve), Jacobians come from finite
differences, and states are eliminated through the linearized dynamics
so the quadratic subproblem is a small dense QP in the inputs, solved by
the in-module active-set solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .qp import QpInfeasible, solve_qp
from .reachability import LipschitzConfig, Metric, UncertaintyBudget, lipschitz_power_sums
from .sampling import draw_samples
from .terminal import TerminalIngredients


class OcpInfeasible(RuntimeError):
    def __init__(self, message: str, violated: list[str] | None = None):
        super().__init__(message)
        self.violated = violated or []


class CertificateViolated(RuntimeError):
    """All samples were falsified: the delta-probability failure event."""


@dataclass(frozen=True)
class OcpConfig:
    """Everything fixed across one receding-horizon run."""

    horizon: int
    Q: NDArray
    R: NDArray
    x_ref: NDArray
    u_ref: NDArray
    terminal: TerminalIngredients
    deviations: NDArray  # c_0..c_{H-1}
    tightenings: NDArray  # Delta_0..Delta_{H-1}
    state_rows: tuple[NDArray, NDArray] | None = None
    input_rows: tuple[NDArray, NDArray] | None = None
    metric: Metric = field(default_factory=Metric.euclidean)
    use_feedback: bool = False
    sqp_iterations: int = 1
    initial_iterations: int = 25
    fd_step: float = 1e-5
    step_tol: float = 1e-8
    defect_tol: float = 1e-8
    merit_penalty: float = 1e3

    def __post_init__(self):
        H = self.horizon
        if H < 1:
            raise ValueError("horizon must be at least 1")
        object.__setattr__(self, "Q", np.atleast_2d(np.asarray(self.Q, dtype=float)))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))
        object.__setattr__(self, "x_ref", np.asarray(self.x_ref, dtype=float).ravel())
        object.__setattr__(self, "u_ref", np.asarray(self.u_ref, dtype=float).ravel())
        dev = np.asarray(self.deviations, dtype=float).ravel()
        tight = np.asarray(self.tightenings, dtype=float).ravel()
        if dev.shape[0] != H or tight.shape[0] != H:
            raise ValueError("need H deviation bounds and H tightenings")
        if tight[0] != 0.0:
            raise ValueError("the stage-0 tightening must be zero")
        object.__setattr__(self, "deviations", dev)
        object.__setattr__(self, "tightenings", tight)

    @property
    def n_u(self) -> int:
        return self.u_ref.shape[0]

    def stage_cost(self, x: NDArray, u: NDArray) -> float:
        dx = np.asarray(x, dtype=float).ravel() - self.x_ref
        du = np.asarray(u, dtype=float).ravel() - self.u_ref
        return float(dx @ self.Q @ dx + du @ self.R @ du)

    def input_law(self, x: NDArray, v: NDArray) -> NDArray:
        """Realized input: v alone, or terminal feedback plus v."""
        if not self.use_feedback:
            return np.asarray(v, dtype=float).ravel()
        t = self.terminal
        return t.u_eq + t.gain @ (np.asarray(x, dtype=float).ravel() - t.x_eq) \
            + np.asarray(v, dtype=float).ravel()


class FixedDynamics:
    """A known function wrapped with the sampled-dynamics interface.

    Used to plant a dynamics of interest (e.g. an eps-close surrogate of
    the truth) into a sample set for falsification diagnostics.
    """

    def __init__(self, fn, input_dim: int, n_outputs: int):
        self.fn = fn
        self.input_dim = input_dim
        self.n_outputs = n_outputs
        self.n_fantasies = 0

    def sample_at(self, z: NDArray) -> NDArray:
        return np.atleast_1d(np.asarray(self.fn(np.asarray(z, dtype=float).ravel()),
                                        dtype=float))

    def mean_at(self, Z: NDArray) -> NDArray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return np.vstack([self.sample_at(z) for z in Z])


@dataclass(frozen=True)
class RemovalRecord:
    time: int
    index: int
    stage: int
    deviation: float


class SampleSet:
    """Monotonically shrinking set of dynamics samples.

    Index -1 is reserved for an optional planted dynamics; drawn samples
    use indices 0..n-1.
    """

    def __init__(self, samples: dict, active: list[int] | None = None):
        self.samples = dict(samples)
        self.active = sorted(self.samples.keys()) if active is None else list(active)
        self.removals: list[RemovalRecord] = []

    @classmethod
    def draw(cls, gps, n: int, master_seed: int, commit_resolution: float = 0.0,
             max_fantasies: int | None = None, cap: int = 100,
             planted=None) -> "SampleSet":
        n_used = min(n, cap)
        drawn = draw_samples(gps, n_used, master_seed,
                             commit_resolution=commit_resolution,
                             max_fantasies=max_fantasies)
        samples = {i: s for i, s in enumerate(drawn)}
        if planted is not None:
            samples[-1] = planted
        return cls(samples)

    def __len__(self) -> int:
        return len(self.active)

    def active_samples(self):
        return [(n, self.samples[n]) for n in self.active]

    def remove(self, time: int, index: int, stage: int, deviation: float) -> None:
        self.active = [n for n in self.active if n != index]
        self.removals.append(RemovalRecord(time, index, stage, deviation))


@dataclass
class OcpSolution:
    inputs: NDArray  # shared decision sequence v, (H, n_u)
    states: dict  # iterate states per sample, (H+1, n_x)
    objective: float
    status: str  # converged | rti | max_iterations
    kkt_residual: float
    sqp_iterations: int
    predicted: dict | None = None  # committed pathwise predictions per sample

    def realized_first_input(self, cfg: OcpConfig, x_now: NDArray) -> NDArray:
        return cfg.input_law(x_now, self.inputs[0])


def _surrogate_step(plant, sample, cfg: OcpConfig):
    def step(x, v):
        u = cfg.input_law(x, v)
        z = plant.gp_input(x, u)
        g = sample.mean_at(z[None, :])[0]
        return plant.f(x, u) + plant.bd(x) @ g
    return step


def _surrogate_rollout(plant, sample, cfg: OcpConfig, x0: NDArray, vs: NDArray) -> NDArray:
    step = _surrogate_step(plant, sample, cfg)
    out = np.zeros((vs.shape[0] + 1, x0.shape[0]))
    out[0] = x0
    for i in range(vs.shape[0]):
        out[i + 1] = step(out[i], vs[i])
    return out


def committed_rollout(plant, sample, cfg: OcpConfig, x0: NDArray, vs: NDArray) -> NDArray:
    """Pathwise propagation (drawing and committing new values)."""
    x0 = np.asarray(x0, dtype=float).ravel()
    out = np.zeros((vs.shape[0] + 1, x0.shape[0]))
    out[0] = x0
    for i in range(vs.shape[0]):
        u = cfg.input_law(out[i], vs[i])
        z = plant.gp_input(out[i], u)
        g = np.atleast_1d(sample.sample_at(z))
        out[i + 1] = plant.f(out[i], u) + plant.bd(out[i]) @ g
        if not np.all(np.isfinite(out[i + 1])):
            raise FloatingPointError(f"prediction diverged at stage {i}")
    return out


def _values(plant, sample, cfg: OcpConfig, xs: NDArray, vs: NDArray) -> NDArray:
    """Surrogate step values along the iterate (one batched query)."""
    H = vs.shape[0]
    metas = []
    queries = []
    for i in range(H):
        u = cfg.input_law(xs[i], vs[i])
        metas.append((xs[i], u))
        queries.append(plant.gp_input(xs[i], u))
    g_all = sample.mean_at(np.asarray(queries))
    return np.vstack([plant.f(x, u) + plant.bd(x) @ g_all[i]
                      for i, (x, u) in enumerate(metas)])


def _linearize(plant, sample, cfg: OcpConfig, xs: NDArray, vs: NDArray):
    """Values and Jacobians of the surrogate step along the iterate.

    Batches every sample-function query (node values plus the central
    finite-difference stencil) into one conditional-mean evaluation.
    """
    H = vs.shape[0]
    n_x = xs.shape[1]
    n_u = vs.shape[1]
    h = cfg.fd_step
    queries = []
    metas = []  # (node, slot) bookkeeping; slot 0 is the value

    def push(i, x, v):
        u = cfg.input_law(x, v)
        queries.append(plant.gp_input(x, u))
        metas.append((x, u))

    for i in range(H):
        x, v = xs[i], vs[i]
        push(i, x, v)
        for j in range(n_x):
            d = np.zeros(n_x)
            d[j] = h * max(1.0, abs(x[j]))
            push(i, x + d, v)
            push(i, x - d, v)
        for j in range(n_u):
            d = np.zeros(n_u)
            d[j] = h * max(1.0, abs(v[j]))
            push(i, x, v + d)
            push(i, x, v - d)
    g_all = sample.mean_at(np.asarray(queries))

    def value(idx):
        x, u = metas[idx]
        return plant.f(x, u) + plant.bd(x) @ g_all[idx]

    per_node = 1 + 2 * n_x + 2 * n_u
    A = np.zeros((H, n_x, n_x))
    B = np.zeros((H, n_x, n_u))
    vals = np.zeros((H, n_x))
    for i in range(H):
        base = i * per_node
        vals[i] = value(base)
        for j in range(n_x):
            hj = h * max(1.0, abs(xs[i][j]))
            A[i, :, j] = (value(base + 1 + 2 * j) - value(base + 2 + 2 * j)) / (2 * hj)
        off = base + 1 + 2 * n_x
        for j in range(n_u):
            hj = h * max(1.0, abs(vs[i][j]))
            B[i, :, j] = (value(off + 2 * j) - value(off + 1 + 2 * j)) / (2 * hj)
    return vals, A, B


def _condense(A: NDArray, B: NDArray, defects: NDArray):
    """Sensitivities M_i (n_x x H n_u) and offsets e_i of delta-x wrt delta-v."""
    H, n_x, n_u = B.shape
    M = np.zeros((H + 1, n_x, H * n_u))
    e = np.zeros((H + 1, n_x))
    for i in range(H):
        M[i + 1] = A[i] @ M[i]
        M[i + 1][:, i * n_u:(i + 1) * n_u] += B[i]
        e[i + 1] = A[i] @ e[i] + defects[i]
    return M, e


def solve_ocp(cfg: OcpConfig, sample_set: SampleSet, x_now: NDArray,
              warm: OcpSolution | None = None,
              iterations: int | None = None, plant=None) -> OcpSolution:
    """Run SQP iterations on the multi-sample OCP at the current state.

    ``iterations`` defaults to ``cfg.sqp_iterations`` (1 = real-time
    iteration, full step).  Raises ``OcpInfeasible`` when the quadratic
    subproblem has no feasible point or the current state violates its
    own box.
    """
    if plant is None:
        raise ValueError("solve_ocp needs the plant geometry")
    x_now = np.asarray(x_now, dtype=float).ravel()
    H = cfg.horizon
    n_x = x_now.shape[0]
    n_u = cfg.n_u
    iters = cfg.sqp_iterations if iterations is None else iterations
    active = sample_set.active_samples()
    if not active:
        raise CertificateViolated("no active dynamics samples")

    # current state must satisfy its own (untightened) box row
    if cfg.state_rows is not None:
        A_x, b_x = cfg.state_rows
        viol = np.atleast_2d(A_x) @ x_now - np.atleast_1d(b_x)
        if np.any(viol > 1e-9):
            raise OcpInfeasible("current state outside the state box",
                                [f"state row {i}" for i in np.flatnonzero(viol > 1e-9)])

    # initial iterate
    if warm is not None and warm.inputs.shape == (H, n_u):
        vs = warm.inputs.copy()
        states = {n: warm.states[n].copy() if n in warm.states
                  else _surrogate_rollout(plant, s, cfg, x_now, vs)
                  for n, s in active}
        for n, _ in active:
            states[n][0] = x_now
    else:
        vs = np.tile(np.zeros(n_u) if cfg.use_feedback else cfg.u_ref, (H, 1))
        states = {n: _surrogate_rollout(plant, s, cfg, x_now, vs) for n, s in active}

    ell_s = cfg.terminal
    rho_eff = _effective_terminal_level(cfg)
    status = "rti"
    kkt = np.inf
    objective = np.inf
    done_iters = 0

    for it in range(max(iters, 1)):
        done_iters = it + 1
        Hqp = np.zeros((H * n_u, H * n_u))
        gqp = np.zeros(H * n_u)
        const = 0.0
        rows_A: list[NDArray] = []
        rows_b: list[float] = []
        row_names: list[str] = []

        models = {}
        for n, s in active:
            xs = states[n]
            vals, A, B = _linearize(plant, s, cfg, xs[:H], vs)
            defects = vals - xs[1:]
            M, e = _condense(A, B, defects)
            models[n] = (M, e)

            # quadratic cost: stages plus terminal
            for i in range(H):
                # state part
                Cx = M[i]
                ox = xs[i] + e[i] - cfg.x_ref
                Hqp += 2.0 * Cx.T @ cfg.Q @ Cx
                gqp += 2.0 * Cx.T @ cfg.Q @ ox
                const += ox @ cfg.Q @ ox
                # input part (realized input)
                Cu = np.zeros((n_u, H * n_u))
                Cu[:, i * n_u:(i + 1) * n_u] = np.eye(n_u)
                if cfg.use_feedback:
                    Cu = Cu + ell_s.gain @ M[i]
                    ou = cfg.input_law(xs[i] + e[i], vs[i]) - cfg.u_ref
                else:
                    ou = vs[i] - cfg.u_ref
                Hqp += 2.0 * Cu.T @ cfg.R @ Cu
                gqp += 2.0 * Cu.T @ cfg.R @ ou
                const += ou @ cfg.R @ ou
            CH = M[H]
            oH = xs[H] + e[H] - ell_s.x_eq
            Hqp += 2.0 * CH.T @ ell_s.cost_matrix @ CH
            gqp += 2.0 * CH.T @ ell_s.cost_matrix @ oH
            const += oH @ ell_s.cost_matrix @ oH

            # tightened state rows for i = 1..H-1 (stage 0 is checked above)
            if cfg.state_rows is not None:
                A_x, b_x = np.atleast_2d(cfg.state_rows[0]), np.atleast_1d(cfg.state_rows[1])
                for i in range(1, H):
                    margin = cfg.tightenings[i]
                    for r, (a_row, b_val) in enumerate(zip(A_x, b_x)):
                        rows_A.append(a_row @ M[i])
                        rows_b.append(b_val - cfg.metric.dual_norm(a_row) * margin
                                      - a_row @ (xs[i] + e[i]))
                        row_names.append(f"state[{r}] stage {i} sample {n}")
            # input rows
            if cfg.input_rows is not None:
                A_u, b_u = np.atleast_2d(cfg.input_rows[0]), np.atleast_1d(cfg.input_rows[1])
                for i in range(H):
                    for r, (a_row, b_val) in enumerate(zip(A_u, b_u)):
                        Cu = np.zeros((n_u, H * n_u))
                        Cu[:, i * n_u:(i + 1) * n_u] = np.eye(n_u)
                        if cfg.use_feedback:
                            Cu = Cu + ell_s.gain @ M[i]
                            base = cfg.input_law(xs[i] + e[i], vs[i])
                        else:
                            base = vs[i]
                        rows_A.append(a_row @ Cu)
                        rows_b.append(b_val - a_row @ base)
                        row_names.append(f"input[{r}] stage {i} sample {n}")
            # terminal supporting halfspace at the current iterate direction
            q = ell_s.cost_matrix @ (xs[H] + e[H] - ell_s.x_eq)
            if np.linalg.norm(q) < 1e-12:
                q = ell_s.cost_matrix[:, 0].copy()
            support = rho_eff * ell_s.metric().dual_norm(q)
            rows_A.append(q @ M[H])
            rows_b.append(support - q @ (xs[H] + e[H] - ell_s.x_eq))
            row_names.append(f"terminal sample {n}")

        Hqp = 0.5 * (Hqp + Hqp.T) + 1e-10 * np.eye(H * n_u)
        A_in = np.vstack(rows_A) if rows_A else None
        b_in = np.asarray(rows_b) if rows_b else None
        try:
            sol = solve_qp(Hqp, gqp, A_in=A_in, b_in=b_in)
        except QpInfeasible as err:
            raise OcpInfeasible(
                "quadratic subproblem infeasible",
                [row_names[i] for i in err.violated if i < len(row_names)],
            ) from None

        dv = sol.x.reshape(H, n_u)
        step = 1.0
        if iters > 1:
            penalty = max(cfg.merit_penalty,
                          5.0 * float(np.max(np.abs(sol.multipliers), initial=0.0)))
            step = _merit_step(plant, cfg, active, x_now, vs, dv, rho_eff,
                               states, penalty)
        vs = vs + step * dv
        new_states = {}
        for n, _ in active:
            M, e = models[n]
            delta = step * (M @ dv.ravel() + e)
            ns = states[n] + delta
            ns[0] = x_now
            new_states[n] = ns
        states = new_states

        step_size = float(np.max(np.abs(step * dv)))
        defect_max = 0.0
        for n, s in active:
            xs = states[n]
            vals = _values(plant, s, cfg, xs[:H], vs)
            defect_max = max(defect_max, float(np.max(np.abs(vals - xs[1:]))))
        stat = sol.stationarity_residual(Hqp, gqp, None, A_in)
        primal = 0.0 if A_in is None else float(np.max(np.maximum(A_in @ sol.x - b_in, 0.0)))
        kkt = max(stat, primal, defect_max)
        objective = float(0.5 * sol.x @ Hqp @ sol.x + gqp @ sol.x + const)
        if iters > 1 and step_size <= cfg.step_tol * (1.0 + float(np.max(np.abs(vs)))) \
                and defect_max <= cfg.defect_tol:
            status = "converged"
            break
    else:
        status = "rti" if iters == 1 else "max_iterations"

    return OcpSolution(inputs=vs, states=states, objective=objective, status=status,
                       kkt_residual=kkt, sqp_iterations=done_iters)


def _effective_terminal_level(cfg: OcpConfig) -> float:
    """Terminal level minus the c_{H-1} tightening in the terminal metric."""
    term = cfg.terminal
    c_term = float(cfg.deviations[-1])
    if c_term == 0.0:
        return term.level
    if cfg.metric.is_euclidean:
        evals = np.linalg.eigvalsh(term.cost_matrix)
        kappa = float(np.sqrt(np.max(evals)))
    else:
        from scipy.linalg import eigh

        gen = eigh(term.cost_matrix, cfg.metric.mat(term.x_eq.shape[0]),
                   eigvals_only=True)
        kappa = float(np.sqrt(np.max(gen)))
    level = term.level - kappa * c_term
    if level <= 0:
        raise OcpInfeasible("terminal set vanishes under its tightening")
    return level


def _merit_step(plant, cfg: OcpConfig, active, x_now, vs, dv, rho_eff,
                iterate_states, penalty) -> float:
    """Backtracking on an l1 merit of the nonlinear surrogate rollout.

    Violations are measured in the same row units as the quadratic
    subproblem (the terminal set through the current supporting
    hyperplane direction), so a penalty above the subproblem multipliers
    makes the merit exact.
    """
    term = cfg.terminal
    # supporting directions frozen at the current iterate
    q_dirs = {}
    for n, _ in active:
        q = term.cost_matrix @ (iterate_states[n][cfg.horizon] - term.x_eq)
        if np.linalg.norm(q) < 1e-12:
            q = term.cost_matrix[:, 0].copy()
        q_dirs[n] = (q, rho_eff * term.metric().dual_norm(q))

    def merit(v_seq):
        total = 0.0
        for n, s in active:
            xs = _surrogate_rollout(plant, s, cfg, x_now, v_seq)
            for i in range(cfg.horizon):
                u = cfg.input_law(xs[i], v_seq[i])
                total += cfg.stage_cost(xs[i], u)
                if cfg.state_rows is not None and i >= 1:
                    A_x, b_x = cfg.state_rows
                    resid = np.atleast_2d(A_x) @ xs[i] - np.atleast_1d(b_x) \
                        + cfg.tightenings[i] * np.array(
                            [cfg.metric.dual_norm(r) for r in np.atleast_2d(A_x)])
                    total += penalty * float(np.sum(np.maximum(resid, 0.0)))
                if cfg.input_rows is not None:
                    A_u, b_u = cfg.input_rows
                    resid = np.atleast_2d(A_u) @ u - np.atleast_1d(b_u)
                    total += penalty * float(np.sum(np.maximum(resid, 0.0)))
            total += term.cost(xs[cfg.horizon])
            q, support = q_dirs[n]
            total += penalty * max(q @ (xs[cfg.horizon] - term.x_eq) - support, 0.0)
        return total

    base = merit(vs)
    for t in (1.0, 0.5, 0.25, 0.125, 0.0625):
        if merit(vs + t * dv) <= base + 1e-12 * (1.0 + abs(base)):
            return t
    return 0.0625


def update_sample_set(sample_set: SampleSet, solution: OcpSolution, x_next: NDArray,
                      cfg: OcpConfig, plant, time_k: int) -> dict:
    """Falsify samples against their previous committed predictions.

    The candidate propagation starts at the realized next state and uses
    the shifted input sequence; sample n is removed when its candidate
    deviates from the previous prediction by more than c_i at any stage.
    Returns the candidate rollouts of the surviving samples (reusable as
    the next warm start).  Raises ``CertificateViolated`` when the set
    empties.
    """
    if solution.predicted is None:
        raise ValueError("solution carries no committed predictions")
    H = cfg.horizon
    x_next = np.asarray(x_next, dtype=float).ravel()
    shifted = solution.inputs[1:]
    candidates = {}
    for n in list(sample_set.active):
        sample = sample_set.samples[n]
        cand = committed_rollout(plant, sample, cfg, x_next, shifted)
        candidates[n] = cand
        prev = solution.predicted[n]
        worst_stage, worst_dev = -1, 0.0
        for i in range(H):
            dev = cfg.metric.norm(cand[i] - prev[i + 1])
            if dev > cfg.deviations[i] + 1e-10:
                worst_stage, worst_dev = i, dev
                break
        if worst_stage >= 0:
            sample_set.remove(time_k, n, worst_stage, worst_dev)
            candidates.pop(n)
    if not sample_set.active:
        raise CertificateViolated(f"sample set emptied at time {time_k}")
    return candidates


@dataclass
class RunLog:
    """Closed-loop record of one receding-horizon run."""

    states: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    stage_costs: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    n_active: list = field(default_factory=list)
    feasible: list = field(default_factory=list)
    removals: list = field(default_factory=list)
    halted: str | None = None
    decrease_bound: float | None = None  # L_c + l_s
    predictions: list = field(default_factory=list)  # optional tube snapshots

    @property
    def steps(self) -> int:
        return len(self.inputs)

    def constraints_ok(self, state_box, input_box, slack: float = 1e-7) -> bool:
        return all(state_box.contains(x, slack) for x in self.states[: self.steps]) \
            and all(input_box.contains(u, slack) for u in self.inputs)


def average_cost(log: RunLog) -> float:
    """Time-averaged applied stage cost, (1/T) sum of l(x(k), u(k))."""
    if not log.stage_costs:
        raise ValueError("empty run log")
    return float(np.mean(log.stage_costs))


def cost_lipschitz_constants(cfg: OcpConfig, state_box) -> tuple[float, float]:
    """Lipschitz constants of the stage and terminal costs over the box.

    Quadratics on a compact set: the gradient bound 2 ||W (x - ref)||
    maximized over box corners, measured in the dual of the tube metric.
    """
    corners = state_box.corners()
    l_stage = 0.0
    l_term = 0.0
    for x in corners:
        l_stage = max(l_stage, 2.0 * cfg.metric.dual_norm(cfg.Q @ (x - cfg.x_ref)))
        l_term = max(l_term, 2.0 * cfg.metric.dual_norm(
            cfg.terminal.cost_matrix @ (x - cfg.terminal.x_eq)))
    return l_stage, l_term


def cost_decrease_constants(l_stage: float, l_term: float, lcfg: LipschitzConfig,
                            budget: UncertaintyBudget, H: int) -> tuple[float, float, float]:
    """(K1, K2, L_c) of the one-step optimal-cost decrease bound.

    K1 = ||B_d|| (L_l sum_{i<=H-2} L^i + L_f L^{H-1})
    K2 = ||B_d|| (L_l (sum_{i<=H-2} L^i + 2 sum_{i<=H-2} sum_{j<i} L^j)
                  + L_f (L^{H-1} + 2 sum_{j<=H-2} L^j))
    and L_c = K1 w_bar + K2 eps; identical to L_l sum c_i + L_f c_{H-1}.
    Vector budgets aggregate per output dimension.
    """
    L = lcfg.constant
    sums = lipschitz_power_sums(L, H)
    powers = L ** np.arange(H)
    k1_core = l_stage * sums[H - 1] + l_term * powers[H - 1]
    double = float(np.sum(sums[:H - 1])) if H >= 2 else 0.0
    k2_core = l_stage * (sums[H - 1] + 2.0 * double) \
        + l_term * (powers[H - 1] + 2.0 * sums[H - 1])
    col = budget.col_norms
    k1 = float(np.sum(col) ) * k1_core if col.shape[0] == 1 else float("nan")
    k2 = float(np.sum(col)) * k2_core if col.shape[0] == 1 else float("nan")
    l_c = float(np.sum(col * budget.noise_bound) * k1_core
                + np.sum(col * budget.eps) * k2_core)
    return k1, k2, l_c


def receding_horizon(cfg: OcpConfig, plant, x0: NDArray, n_steps: int,
                     sample_set: SampleSet, lcfg: LipschitzConfig | None = None,
                     budget: UncertaintyBudget | None = None,
                     record_predictions: bool = False) -> RunLog:
    """Closed loop: solve, apply the first input, falsify, repeat.

    ``n_steps`` = 0 performs only the initial solve.  An infeasible OCP
    or an emptied sample set halts the run with the reason recorded.
    """
    log = RunLog()
    x = np.asarray(x0, dtype=float).ravel()
    if lcfg is not None and budget is not None:
        l_stage, l_term = cost_lipschitz_constants(cfg, _plant_box(plant))
        _, _, l_c = cost_decrease_constants(l_stage, l_term, lcfg, budget, cfg.horizon)
        log.decrease_bound = l_c + cfg.terminal.offset
    warm: OcpSolution | None = None

    for k in range(n_steps + 1):
        try:
            solution = solve_ocp(cfg, sample_set, x, warm=warm,
                                 iterations=cfg.initial_iterations if k == 0 else None,
                                 plant=plant)
        except OcpInfeasible as err:
            log.states.append(x.copy())
            log.objectives.append(np.nan)
            log.n_active.append(len(sample_set))
            log.feasible.append(False)
            log.halted = f"infeasible at step {k}: {err}"
            break
        solution.predicted = {
            n: committed_rollout(plant, s, cfg, x, solution.inputs)
            for n, s in sample_set.active_samples()
        }
        log.states.append(x.copy())
        log.objectives.append(solution.objective)
        log.n_active.append(len(sample_set))
        log.feasible.append(True)
        if record_predictions:
            log.predictions.append({n: p.copy() for n, p in solution.predicted.items()})
        if k == n_steps:
            break
        u = solution.realized_first_input(cfg, x)
        log.inputs.append(u.copy())
        log.stage_costs.append(cfg.stage_cost(x, u))
        x = plant.step(x, u)
        try:
            candidates = update_sample_set(sample_set, solution, x, cfg, plant, k)
        except CertificateViolated:
            log.states.append(x.copy())
            log.objectives.append(np.nan)
            log.n_active.append(0)
            log.feasible.append(False)
            log.halted = f"certificate violated at step {k}"
            break
        log.removals = list(sample_set.removals)
        # shifted warm start: candidate states extended by a zero move
        v_last = np.zeros(cfg.n_u) if cfg.use_feedback else cfg.terminal.u_eq
        v_warm = np.vstack([solution.inputs[1:], v_last[None, :]])
        warm_states = {}
        for n, cand in candidates.items():
            ext = np.vstack([cand, cand[-1][None, :]])
            s = sample_set.samples[n]
            ext[-1] = _surrogate_step(plant, s, cfg)(cand[-1], v_warm[-1])
            warm_states[n] = ext
        warm = OcpSolution(inputs=v_warm, states=warm_states, objective=np.nan,
                           status="warm", kkt_residual=np.inf, sqp_iterations=0)
    log.removals = list(sample_set.removals)
    return log


def decrease_diagnostic(log: RunLog) -> tuple[NDArray, NDArray]:
    """Per-step optimal-cost decrease vs its certified bound.

    Returns (lhs, rhs) with lhs_k = J*(k+1) - J*(k) and
    rhs_k = |N_{k+1}| (L_c + l_s - l(x(k), u(k))); requires the run to
    have been started with the Lipschitz/budget data so the bound is set.
    """
    if log.decrease_bound is None:
        raise ValueError("run was logged without decrease-bound constants")
    T = log.steps
    obj = np.asarray(log.objectives)
    lhs = obj[1:T + 1] - obj[:T]
    n_next = np.asarray(log.n_active[1:T + 1], dtype=float)
    rhs = n_next * (log.decrease_bound - np.asarray(log.stage_costs))
    return lhs, rhs


def _plant_box(plant):
    return plant.state_box if hasattr(plant, "state_box") else plant.model.state_box
