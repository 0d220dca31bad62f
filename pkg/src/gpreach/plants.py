"""Ground-truth test systems: pendulum and kinematic car.

Each plant splits its discrete-time dynamics into a known closed-form
part ``f(x, u)``, a projection ``B_d(x)`` of full column rank on the
admissible set, and an unknown part ``g(z)`` acting on a low-dimensional
slice ``z = gp_input(x, u)`` of the state-input space:

    x(k+1) = f(x(k), u(k)) + B_d(x(k)) (g(z(k)) + w(k)),   |w| <= w_bar.

``TruePlant`` wraps a reference (or fitted kernel-expansion) ``g`` with a
bounded noise generator to simulate the real closed loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .gp import Dataset, RkhsFunction, chol_with_jitter
from .kernels import Kernel, _as_2d

GRAVITY = 9.81


@dataclass(frozen=True)
class Box:
    lo: NDArray
    hi: NDArray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box bounds must satisfy lo <= hi elementwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def contains(self, x: NDArray, slack: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float).ravel()
        return bool(np.all(x >= self.lo - slack) and np.all(x <= self.hi + slack))

    def corners(self) -> NDArray:
        d = self.dim
        out = np.zeros((2 ** d, d))
        for i in range(2 ** d):
            for j in range(d):
                out[i, j] = self.hi[j] if (i >> j) & 1 else self.lo[j]
        return out

    def grid(self, points_per_dim: int) -> NDArray:
        axes = [np.linspace(a, b, points_per_dim) for a, b in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def halfspaces(self) -> tuple[NDArray, NDArray]:
        """(A, b) with A x <= b; infinite bounds contribute no rows."""
        rows, offs = [], []
        for j in range(self.dim):
            if np.isfinite(self.hi[j]):
                row = np.zeros(self.dim)
                row[j] = 1.0
                rows.append(row)
                offs.append(self.hi[j])
            if np.isfinite(self.lo[j]):
                row = np.zeros(self.dim)
                row[j] = -1.0
                rows.append(row)
                offs.append(-self.lo[j])
        return np.asarray(rows).reshape(len(rows), self.dim), np.asarray(offs)


@dataclass(frozen=True)
class KnownModel:
    """Known part of a plant plus its geometry and constraint boxes."""

    name: str
    n_x: int
    n_u: int
    n_g: int
    dt: float
    f: Callable[[NDArray, NDArray], NDArray]
    bd: Callable[[NDArray], NDArray]
    gp_input: Callable[[NDArray, NDArray], NDArray]
    gp_input_dim: int
    state_box: Box
    input_box: Box
    gp_box: Box

    def bd_col_norms(self, metric=None, probe_states: NDArray | None = None) -> NDArray:
        """Per-column norms of B_d, maximized over probe states.

        State-dependent projections (the car's velocity scaling) are
        bounded over the state box corners unless probes are given.
        """
        if probe_states is None:
            probe_states = self.state_box.corners()
        norms = np.zeros(self.n_g)
        for x in np.atleast_2d(probe_states):
            B = self.bd(np.asarray(x, dtype=float))
            for i in range(self.n_g):
                col = B[:, i]
                val = metric.norm(col) if metric is not None else float(np.linalg.norm(col))
                norms[i] = max(norms[i], val)
        return norms


def pendulum_model(length: float = 10.0, dt: float = 0.015) -> tuple[KnownModel, Callable]:
    """Pendulum with state (angle, angular rate) and acceleration input.

    The unknown part collects gravity and actuation,
    g(angle, accel) = -(g_a / length) sin(angle) dt + accel dt, entering
    the rate equation only.  Constraint boxes other than the training
    region are implementation defaults, not reported values.
    """
    if length <= 0 or dt <= 0:
        raise ValueError("length and dt must be positive")

    def f(x, u):
        return np.array([x[0] + x[1] * dt, x[1]])

    def bd(x):
        return np.array([[0.0], [1.0]])

    def gp_input(x, u):
        return np.array([x[0], u[0]])

    def reference(Z):
        Z = _as_2d(Z)
        return -(GRAVITY / length) * np.sin(Z[:, 0]) * dt + Z[:, 1] * dt

    model = KnownModel(
        name="pendulum", n_x=2, n_u=1, n_g=1, dt=dt,
        f=f, bd=bd, gp_input=gp_input, gp_input_dim=2,
        state_box=Box([1.5, -3.0], [4.5, 3.0]),
        input_box=Box([-5.0], [5.0]),
        gp_box=Box([2.1, -5.0], [3.6, 5.0]),
    )
    return model, reference


def car_model(l_f: float = 1.105, l_r: float = 1.738, dt: float = 0.06) -> tuple[KnownModel, Callable]:
    """Kinematic bicycle with state (x, y, heading, speed), input (steer, accel).

    The unknown part is the slip-angle kinematics g(heading, steer) in
    R^3; the projection scales with speed, which is known exactly, so the
    admissible speed range keeps B_d full column rank.  Velocity and
    acceleration boxes are implementation defaults, not reported values.
    """
    if l_f <= 0 or l_r <= 0:
        raise ValueError("axle distances must be positive")

    def f(x, u):
        return np.array([x[0], x[1], x[2], x[3] + u[1] * dt])

    def bd(x):
        B = np.zeros((4, 3))
        B[0, 0] = B[1, 1] = B[2, 2] = x[3]
        return B

    def gp_input(x, u):
        return np.array([x[2], u[0]])

    ratio = l_r / (l_f + l_r)

    def reference(Z):
        Z = _as_2d(Z)
        heading, steer = Z[:, 0], Z[:, 1]
        slip = np.arctan(ratio * np.tan(steer))
        return np.stack([
            np.cos(heading + slip) * dt,
            np.sin(heading + slip) * dt,
            np.sin(slip) / l_r * dt,
        ], axis=1)

    model = KnownModel(
        name="car", n_x=4, n_u=2, n_g=3, dt=dt,
        f=f, bd=bd, gp_input=gp_input, gp_input_dim=2,
        state_box=Box([-5.0, -3.0, -1.0, 0.5], [300.0, 3.0, 1.0, 8.0]),
        input_box=Box([-0.6, -3.0], [0.6, 3.0]),
        gp_box=Box([-1.0, -0.6], [1.0, 0.6]),
    )
    return model, reference


def fit_rkhs_ground_truth(reference: Callable, kernel: Kernel, centers: NDArray,
                          norm_cap: float, output_index: int | None = None,
                          validation_grid: NDArray | None = None,
                          ridge: float = 1e-10) -> tuple[RkhsFunction, float]:
    """Kernel interpolation of a reference function with a norm cap.

    Solves the (lightly ridged) interpolation system on the centers, then
    rescales the weights when the resulting RKHS norm exceeds the cap.
    Returns the expansion and its sup deviation from the reference over
    the validation grid (the centers when none is given).
    """
    if norm_cap <= 0:
        raise ValueError("norm_cap must be positive")
    centers = _as_2d(centers)
    vals = np.asarray(reference(centers), dtype=float)
    if vals.ndim == 2:
        if output_index is None:
            raise ValueError("vector-valued reference needs output_index")
        vals = vals[:, output_index]
    K = kernel.gram(centers)
    scale = float(np.trace(K)) / max(len(centers), 1)
    L, _ = chol_with_jitter(K + ridge * scale * np.eye(len(centers)))
    weights = np.linalg.solve(L.T, np.linalg.solve(L, vals))
    fn = RkhsFunction(kernel, centers, weights)
    norm = fn.rkhs_norm()
    if norm > norm_cap:
        fn = fn.scaled(norm_cap / norm)
    grid = centers if validation_grid is None else _as_2d(validation_grid)
    ref_vals = np.asarray(reference(grid), dtype=float)
    if ref_vals.ndim == 2:
        ref_vals = ref_vals[:, output_index]
    sup_dev = float(np.max(np.abs(fn(grid) - ref_vals))) if len(grid) else 0.0
    return fn, sup_dev


def fit_vector_ground_truth(reference: Callable, kernels, centers: NDArray,
                            norm_cap: float, n_outputs: int,
                            validation_grid: NDArray | None = None):
    """Per-output-dimension RKHS fits sharing the centers."""
    if isinstance(kernels, Kernel):
        kernels = [kernels] * n_outputs
    fits, devs = [], []
    for i in range(n_outputs):
        ref_i = reference if n_outputs == 1 else reference
        fn, dev = fit_rkhs_ground_truth(
            ref_i, kernels[i], centers, norm_cap,
            output_index=i if n_outputs > 1 else None,
            validation_grid=validation_grid,
        )
        fits.append(fn)
        devs.append(dev)
    return fits, devs


class BoundedNoise:
    """Componentwise noise generator hard-bounded by ``bound``.

    'uniform' draws from [-bound, bound]; 'truncated-gaussian' draws a
    normal with half-bound deviation, rejected outside the bound.
    """

    def __init__(self, bound: float, n_dim: int, rng: np.random.Generator,
                 kind: str = "uniform"):
        if bound < 0:
            raise ValueError("noise bound must be nonnegative")
        if kind not in ("uniform", "truncated-gaussian"):
            raise ValueError(f"unknown noise kind '{kind}'")
        self.bound = float(bound)
        self.n_dim = n_dim
        self.rng = rng
        self.kind = kind

    def draw(self) -> NDArray:
        if self.bound == 0.0:
            return np.zeros(self.n_dim)
        if self.kind == "uniform":
            return self.rng.uniform(-self.bound, self.bound, size=self.n_dim)
        out = np.empty(self.n_dim)
        for i in range(self.n_dim):
            while True:
                v = self.rng.normal(0.0, self.bound / 2.0)
                if abs(v) <= self.bound:
                    out[i] = v
                    break
        return out


class TruePlant:
    """Simulator of the real system: known part + ground truth + noise."""

    def __init__(self, model: KnownModel, g_star, noise_bound: float,
                 rng: np.random.Generator | None = None, noise_kind: str = "uniform"):
        self.model = model
        self._g_star = g_star
        self.noise = BoundedNoise(noise_bound, model.n_g,
                                  rng if rng is not None else np.random.default_rng(0),
                                  noise_kind)

    @property
    def noise_bound(self) -> float:
        return self.noise.bound

    # geometry delegation so a TruePlant can stand in for its model
    @property
    def n_x(self) -> int:
        return self.model.n_x

    @property
    def n_u(self) -> int:
        return self.model.n_u

    @property
    def n_g(self) -> int:
        return self.model.n_g

    def f(self, x, u):
        return self.model.f(x, u)

    def bd(self, x):
        return self.model.bd(x)

    def gp_input(self, x, u):
        return self.model.gp_input(x, u)

    def bd_col_norms(self, metric=None, probe_states=None):
        return self.model.bd_col_norms(metric=metric, probe_states=probe_states)

    def g_star(self, z: NDArray) -> NDArray:
        z = np.asarray(z, dtype=float).ravel()
        if isinstance(self._g_star, (list, tuple)):
            return np.array([fn(z[None, :])[0] for fn in self._g_star])
        return np.atleast_1d(np.asarray(self._g_star(z[None, :]), dtype=float).ravel())

    def step(self, x: NDArray, u: NDArray) -> NDArray:
        """One true step: f(x, u) + B_d(x) (g*(z) + w)."""
        x = np.asarray(x, dtype=float).ravel()
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError("state and input must be finite")
        m = self.model
        z = m.gp_input(x, u)
        nxt = m.f(x, u) + m.bd(x) @ (self.g_star(z) + self.noise.draw())
        if not np.all(np.isfinite(nxt)):
            raise FloatingPointError("true step produced a non-finite state")
        return nxt

    def rollout(self, x0: NDArray, inputs: NDArray,
                feedback: NDArray | None = None) -> NDArray:
        x0 = np.asarray(x0, dtype=float).ravel()
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        if inputs.size and inputs.shape[1] != self.model.n_u:
            inputs = inputs.reshape(-1, self.model.n_u)
        out = np.zeros((inputs.shape[0] + 1, x0.shape[0]))
        out[0] = x0
        for k in range(inputs.shape[0]):
            u = inputs[k] if feedback is None else feedback @ out[k] + inputs[k]
            out[k + 1] = self.step(out[k], u)
        return out


def recover_outputs(model: KnownModel, x: NDArray, u: NDArray, x_next: NDArray) -> NDArray:
    """One-step prediction error pushed through the pseudo-inverse of B_d."""
    B = model.bd(np.asarray(x, dtype=float))
    return np.linalg.pinv(B) @ (np.asarray(x_next, dtype=float) - model.f(x, u))


def training_dataset(plant: TruePlant, grid_counts, noise_scale: float,
                     box: Box | None = None) -> Dataset:
    """Equally spaced mesh of GP-input points with noisy targets.

    ``grid_counts`` gives the number of points per GP-input dimension,
    e.g. (4, 9) for the pendulum's 36-point mesh.  Targets are
    g*(z) + w with the plant's bounded noise generator.
    """
    box = plant.model.gp_box if box is None else box
    counts = np.atleast_1d(np.asarray(grid_counts, dtype=int))
    if counts.shape[0] != box.dim:
        raise ValueError("need one grid count per GP-input dimension")
    axes = [np.linspace(a, b, c) for a, b, c in zip(box.lo, box.hi, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    Z = np.stack([m.ravel() for m in mesh], axis=1)
    n_g = plant.model.n_g
    Y = np.zeros((n_g, Z.shape[0]))
    for j, z in enumerate(Z):
        Y[:, j] = plant.g_star(z) + plant.noise.draw()
    return Dataset(Z, Y, noise_scale=noise_scale, noise_bound=plant.noise_bound)
