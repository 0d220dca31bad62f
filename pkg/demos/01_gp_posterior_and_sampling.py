"""GP posterior basics on the pendulum's unknown dynamics.

Fits the exact GP posterior to mesh data from the pendulum's unknown
term, then realizes a few pathwise function samples and shows that a
sample is a genuine function: re-querying an input returns the same
value, and fresh samples scatter around the posterior mean with the
posterior spread.

Run:  python demos/01_gp_posterior_and_sampling.py
"""

import numpy as np

from gpreach.experiments import pendulum_setup
from gpreach.sampling import RngStream, SampledDynamics

setup = pendulum_setup(seed=0)
gp = setup.gps[0]
print(f"dataset: {gp.n_points} points, noise scale {gp.noise_scale:g}")
print(f"posterior mean RKHS norm: {gp.mean_rkhs_norm():.3f}")
print(f"ground-truth RKHS norm:   {setup.norm_bound:.3f}")

# posterior mean and spread along a slice at zero commanded acceleration
thetas = np.linspace(2.1, 3.6, 9)
slice_z = np.stack([thetas, np.zeros_like(thetas)], axis=1)
mean = gp.mean(slice_z)
std = gp.std(slice_z)
truth = setup.g_star[0](slice_z)
print("\ntheta     truth       mean        std       |gap|")
for i, th in enumerate(thetas):
    print(f"{th:5.2f}  {truth[i]: .6f}  {mean[i]: .6f}  {std[i]:.2e}  "
          f"{abs(truth[i] - mean[i]):.2e}")

# three pathwise samples evaluated at the same input
z = np.array([2.8, 0.5])
print(f"\npathwise samples at z = {z}:")
for idx in range(3):
    sample = SampledDynamics([gp], RngStream(42, idx))
    first = sample.sample_at(z)[0]
    again = sample.sample_at(z)[0]
    assert first == again, "a sampled function must be a function"
    print(f"  sample {idx}: {first: .6f} (re-query identical: {first == again})")
print(f"  posterior mean here:  {gp.mean(z[None, :])[0]: .6f}")
print(f"  posterior std here:   {gp.std(z[None, :])[0]:.2e}")
