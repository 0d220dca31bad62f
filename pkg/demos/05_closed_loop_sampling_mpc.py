"""Closed-loop sampling-based MPC swinging the pendulum upright.

Certifies the number of samples at the benchmark tolerances, synthesizes
terminal ingredients from sampled linearizations, and runs the
receding-horizon controller: solve the multi-sample problem, apply the
first input, falsify samples whose shifted predictions deviate beyond
the per-step bounds, repeat.  The log shows the shrinking sample set and
the state homing in on the upright equilibrium.

Run:  python demos/05_closed_loop_sampling_mpc.py   (about two minutes)
"""

import numpy as np

from gpreach.certificates import (
    estimate_small_ball_exponent,
    required_samples,
    shift_cost_bounded,
    tensor_grid,
)
from gpreach.experiments import (
    pendulum_control_setup,
    pendulum_sample_set,
    pendulum_setup,
)
from gpreach.mpc import average_cost, receding_horizon

setup = pendulum_setup(seed=0)
grid = tensor_grid(setup.model.gp_box.lo, setup.model.gp_box.hi, 30)
cost = shift_cost_bounded(setup.gps[0], setup.norm_bound, setup.noise_bound)
phi = estimate_small_ball_exponent(setup.gps[0], setup.eps, grid, 30_000,
                                   np.random.default_rng(21))
n = required_samples(cost, phi.exponent, setup.delta, "bounded")
print(f"certified N = {n} samples at eps = {setup.eps:g}, delta = {setup.delta:g}")

setup = pendulum_control_setup(setup, horizon=20)
term = setup.terminal
print(f"terminal set: level {term.level:.2f}, contraction {term.contraction:.3f}, "
      f"feedback gain {np.round(term.gain.ravel(), 2)}")
print(f"tube metric Lipschitz constant {setup.lipschitz.constant:.4f}")

sample_set = pendulum_sample_set(setup, n, master_seed=5, cap=140)
x0 = np.array([2.15, 2.3])
log = receding_horizon(setup.ocp, setup.plant, x0, 110, sample_set,
                       lcfg=setup.lipschitz, budget=setup.budget)

print(f"\nrun: {log.steps} steps, halted = {log.halted}, "
      f"removals = {len(log.removals)}")
print("  k    theta    omega   |active|  terminal distance")
for k in range(0, len(log.states), 10):
    x = log.states[k]
    print(f"{k:4d}   {x[0]:6.3f}  {x[1]:6.3f}   {log.n_active[k]:5d}    "
          f"{term.distance(x):8.2f}")
print(f"\naverage applied stage cost: {average_cost(log):.3f} "
      f"(certified decrease bound {log.decrease_bound:.2f})")
print(f"all applied states and inputs inside their boxes: "
      f"{log.constraints_ok(setup.model.state_box, setup.model.input_box)}")
