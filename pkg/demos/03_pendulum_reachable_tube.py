"""A reachable tube around sampled pendulum trajectories.

Draws a certified number of dynamics samples, rolls each out under a
shared input sequence, and wraps the cloud with Lipschitz-accumulated
radii.  Noisy rollouts of the true system are then checked against the
tube; the containment fraction should respect the failure probability.

Run:  python demos/03_pendulum_reachable_tube.py
"""

import numpy as np

from gpreach.certificates import (
    estimate_small_ball_exponent,
    required_samples,
    shift_cost_bounded,
    tensor_grid,
)
from gpreach.experiments import pendulum_setup, true_dynamics_lipschitz
from gpreach.reachability import LipschitzConfig, Metric, UncertaintyBudget, build_tube
from gpreach.sampling import draw_samples

setup = pendulum_setup(seed=0, eps=6e-3, delta=0.1)
model = setup.model

grid = tensor_grid(model.gp_box.lo, model.gp_box.hi, 25)
cost = shift_cost_bounded(setup.gps[0], setup.norm_bound, setup.noise_bound)
phi = estimate_small_ball_exponent(setup.gps[0], setup.eps, grid, 20_000,
                                   np.random.default_rng(5))
n = required_samples(cost, phi.hi, setup.delta, "bounded")
print(f"certified N = {n} at eps = {setup.eps:g}, delta = {setup.delta:g}")

metric = Metric.euclidean()
lip = true_dynamics_lipschitz(model, setup.g_star, metric, points_per_dim=9,
                              inflation=1.02)
lcfg = LipschitzConfig(lip, metric=metric)
budget = UncertaintyBudget.from_matrix(model.bd(np.zeros(2)), setup.eps,
                                       setup.noise_bound, metric)
print(f"Lipschitz constant {lip:.4f}, one-step residual {budget.eps_bar:.2e}")

H = 30
x0 = np.array([2.3, 0.4])
inputs = np.random.default_rng(6).uniform(-0.4, 0.4, size=(H, 1))
samples = draw_samples(setup.gps, n, master_seed=77)
tube = build_tube(samples, setup.plant, x0, inputs, lcfg, budget)

print("\n k   radius    center spread (theta)")
for k in range(0, H + 1, 5):
    spread = tube.centers[:, k, 0].max() - tube.centers[:, k, 0].min()
    print(f"{k:3d}  {tube.radii[k]:.4f}    {spread:.4f}")

reps = 200
hits = sum(tube.contains_trajectory(setup.plant.rollout(x0, inputs), slack=1e-9)
           for _ in range(reps))
print(f"\ncontainment of noisy true rollouts: {hits}/{reps} "
      f"(target at least {1 - setup.delta:.2f})")
