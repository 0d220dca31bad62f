"""How many posterior samples until one is uniformly eps-close?

Reproduces the certificate pipeline on the pendulum benchmark: the
data-dependent shift cost, the Monte Carlo small-ball exponent, and the
certified count N over a range of tolerances, showing the steep growth
as eps shrinks.

Run:  python demos/02_sample_count_certificate.py
"""

import numpy as np

from gpreach.certificates import rate_envelope
from gpreach.experiments import pendulum_setup

setup = pendulum_setup(seed=0)
rng = np.random.default_rng(17)
eps_values = [8e-3, 4e-3, 2e-3, 1.5e-3, 1.2e-3]
report = setup.certificate(draws=20_000, rng=rng, eps_values=eps_values)

print(f"shift cost C_D = {report.shift_cost:.3f} "
      f"(norm bound {report.norm_bound:.3f}, delta {report.delta:g}, bounded noise)")
print("\n  eps       phi_hat   [lo, hi]            N")
for row in report.rows:
    e = row.estimate
    n = "infeasible" if row.count is None else row.count
    flag = "  (censored)" if e.censored else ""
    print(f"  {row.eps:<8g}  {e.exponent:7.3f}   [{e.lo:6.3f}, {e.hi:6.3f}]   {n}{flag}")

print("\nasymptotic envelope shapes (scale constant set to 1):")
for e in (0.5, 0.2, 0.1, 0.05):
    se = rate_envelope("se", e, dim=2, scale=1.0)
    ma = rate_envelope("matern", e, dim=2, scale=1.0, nu=2.5)
    print(f"  eps = {e:<5g}: squared-exponential ~ {se:9.3g},  matern(5/2) ~ {ma:9.3g}")
