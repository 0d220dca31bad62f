"""Experiment pipelines behind the command-line interface.

Each pipeline consumes a ``RunConfig``, writes plot-ready CSV files plus
a JSON summary into the run directory, and finishes with a manifest
listing every produced file with its content hash.  Given the same
config and seed the CSV outputs are byte-identical; wall-clock timings
live only in the manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .certificates import confidence_scaling
from .config import ConfigError, RunConfig
from .experiments import (
    car_maneuver_inputs,
    car_setup,
    car_tube_configs,
    pendulum_control_setup,
    pendulum_sample_set,
    pendulum_setup,
)
from .mpc import average_cost, receding_horizon
from .reachability import baseline_sequential_tube, build_tube
from .sampling import draw_samples


class CensoredEstimate(RuntimeError):
    """A censored small-ball estimate cannot certify a count."""


@dataclass
class RunArtifact:
    directory: Path
    files: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def path(self, name: str) -> Path:
        return self.directory / name


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return repr(float(value))


def write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def finalize(artifact: RunArtifact, config: RunConfig) -> None:
    """Snapshot the config and write the hash manifest."""
    config.save(artifact.path("config.txt"))
    artifact.files.append("config.txt")
    with artifact.path("summary.json").open("w") as fh:
        json.dump(artifact.summary, fh, indent=2, sort_keys=True)
    artifact.files.append("summary.json")
    manifest = {
        "version": __version__,
        "timings_s": artifact.timings,
        "files": {
            name: sha256_of(artifact.path(name)) for name in sorted(set(artifact.files))
        },
    }
    with artifact.path("manifest.json").open("w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def build_setup(config: RunConfig):
    kind = config.get("plant.kind", "pendulum")
    seed = config.get_int("seed", 0)
    eps_list = config.get_floats("cert.eps")
    common = dict(
        noise_bound=config.get_float("plant.noise_bound"),
        noise_scale=config.get_float("gp.noise_scale"),
        eps=float(eps_list[0]),
        delta=config.get_float("cert.delta"),
        seed=seed,
        signal_variance=config.get_float("kernel.signal_variance"),
        lengthscales=config.get_floats("kernel.lengthscales"),
    )
    if kind == "pendulum":
        return pendulum_setup(**common)
    if kind == "car":
        return car_setup(**common)
    raise ConfigError(f"unknown plant '{kind}'")


def certified_count(config: RunConfig, setup, rng: np.random.Generator):
    report = setup.certificate(config.get_int("cert.draws", 20000), rng,
                               eps_values=config.get_floats("cert.eps"),
                               mode=config.get("cert.mode", "bounded"))
    row = report.rows[0]
    if row.estimate.censored and not config.get_bool("cert.allow_censored", False):
        raise CensoredEstimate(
            f"small-ball estimate censored at eps={row.eps}; re-run with more draws "
            "or allow censored estimates explicitly"
        )
    if row.count is None:
        raise CensoredEstimate(f"count infeasible at eps={row.eps}")
    return row.count, report


def _certificate_from_csv(config: RunConfig, rng: np.random.Generator):
    """Certify directly from an ingested dataset (no plant simulation)."""
    from .certificates import certify, default_phi_grid
    from .gp import Dataset, multi_output_posteriors
    from .kernels import kernel_from_name

    n_outputs = config.get_int("data.n_outputs", 1)
    dataset = Dataset.from_csv(config.require("data.csv"), n_outputs,
                               noise_scale=config.get_float("gp.noise_scale"),
                               noise_bound=config.get_float("plant.noise_bound"))
    kernel = kernel_from_name(config.get("kernel.kind", "se"),
                              config.get_float("kernel.signal_variance"),
                              config.get_floats("kernel.lengthscales"),
                              nu=config.get_float("kernel.nu", 2.5))
    gps = multi_output_posteriors(kernel, dataset)
    lo = np.min(dataset.inputs, axis=0)
    hi = np.max(dataset.inputs, axis=0)
    grid = default_phi_grid(config.get_floats("cert.box_lo", lo),
                            config.get_floats("cert.box_hi", hi), rng)
    return certify(gps, config.get_floats("cert.eps"),
                   config.get_float("cert.delta"),
                   config.get_float("gp.norm_bound"),
                   config.get("cert.mode", "bounded"), grid,
                   config.get_int("cert.draws", 20000), rng,
                   noise_bound=config.get_float("plant.noise_bound"))


def cmd_complexity(config: RunConfig, out_dir: str | Path) -> RunArtifact:
    """Certificate curve over the configured eps list."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifact = RunArtifact(out)
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.get_int("seed", 0) + 17)
    if config.get("data.csv"):
        report = _certificate_from_csv(config, rng)
    else:
        setup = build_setup(config)
        if config.get("gp.norm_bound") is not None:
            setup.norm_bound = config.get_float("gp.norm_bound")
        report = setup.certificate(config.get_int("cert.draws", 20000), rng,
                                   eps_values=config.get_floats("cert.eps"),
                                   mode=config.get("cert.mode", "bounded"))
    allow = config.get_bool("cert.allow_censored", False)
    for row in report.rows:
        if row.estimate.censored and not allow:
            raise CensoredEstimate(
                f"small-ball estimate censored at eps={row.eps}"
            )
    rows = [
        (r.eps, r.estimate.exponent, r.estimate.lo, r.estimate.hi,
         report.shift_cost, report.beta, r.count if r.count is not None else -1)
        for r in report.rows
    ]
    write_csv(artifact.path("certificate.csv"),
              ["eps", "phi_hat", "phi_lo", "phi_hi", "C_D", "beta_D", "N"], rows)
    artifact.files.append("certificate.csv")
    artifact.summary = report.to_dict()
    artifact.timings["total"] = time.perf_counter() - t0
    finalize(artifact, config)
    return artifact


def cmd_reach(config: RunConfig, out_dir: str | Path) -> RunArtifact:
    """Sampling tube (optionally plus the sequential baseline) for a
    stored input sequence, with a containment report."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifact = RunArtifact(out)
    t0 = time.perf_counter()
    setup = build_setup(config)
    seed = config.get_int("seed", 0)
    rng = np.random.default_rng(seed + 23)

    if config.get_bool("reach.certify", False):
        n_samples, _ = certified_count(config, setup, rng)
    else:
        n_samples = config.get_int("reach.n_samples", 60)

    horizon = config.get_int("reach.horizon", 20)
    kind = config.get("plant.kind", "pendulum")
    if kind == "car":
        lcfg, base_lcfg, budget = car_tube_configs(
            setup, speed_cap=config.get_float("reach.speed_cap", 6.0))
        inputs = car_maneuver_inputs(horizon)
    else:
        from .experiments import true_dynamics_lipschitz
        from .reachability import LipschitzConfig, Metric, UncertaintyBudget

        metric = Metric.euclidean()
        lip = config.get("lipschitz.constant")
        if lip is None:
            lip = true_dynamics_lipschitz(setup.model, setup.g_star, metric,
                                          points_per_dim=8, inflation=1.02)
        lcfg = LipschitzConfig(float(lip), metric=metric)
        base_lcfg = lcfg
        budget = UncertaintyBudget.from_matrix(
            setup.model.bd(np.asarray(config.get_floats("x0"))),
            setup.eps, setup.noise_bound, metric)
        in_rng = np.random.default_rng(seed + 29)
        inputs = in_rng.uniform(setup.model.input_box.lo * 0.1,
                                setup.model.input_box.hi * 0.1,
                                size=(horizon, setup.model.n_u))

    x0 = np.asarray(config.get_floats("x0"))
    samples = draw_samples(setup.gps, n_samples, master_seed=seed)
    tube = build_tube(samples, setup.plant, x0, inputs, lcfg, budget)

    base = None
    if config.get_bool("reach.baseline", False):
        betas = [confidence_scaling(gp, setup.norm_bound, setup.delta)
                 for gp in setup.gps]
        base = baseline_sequential_tube(setup.gps, setup.plant, x0, inputs,
                                        base_lcfg, betas, setup.noise_bound,
                                        rng=np.random.default_rng(seed + 31))

    center_rows = [
        (n, k, *tube.centers[n, k]) for n in range(tube.n_samples)
        for k in range(horizon + 1)
    ]
    write_csv(artifact.path("centers.csv"),
              ["n", "k"] + [f"x{i}" for i in range(setup.model.n_x)], center_rows)
    artifact.files.append("centers.csv")
    radii_header = ["k", "eps_k"] + (["baseline_r_k"] if base is not None else [])
    radii_rows = [
        (k, tube.radii[k], *(() if base is None else (base[k],)))
        for k in range(horizon + 1)
    ]
    write_csv(artifact.path("radii.csv"), radii_header, radii_rows)
    artifact.files.append("radii.csv")

    checks = config.get_int("reach.check_rollouts", 100)
    contained = []
    for _ in range(checks):
        truth = setup.plant.rollout(x0, inputs, feedback=lcfg.feedback)
        contained.append(tube.contains_trajectory(truth, slack=1e-9))
    write_csv(artifact.path("containment.csv"), ["rep", "contained"],
              [(i, c) for i, c in enumerate(contained)])
    artifact.files.append("containment.csv")

    artifact.summary = {
        "n_samples": n_samples,
        "horizon": horizon,
        "lipschitz": lcfg.constant,
        "eps_bar": budget.eps_bar,
        "coverage": float(np.mean(contained)) if contained else None,
        "radii_final": float(tube.radii[-1]),
        "baseline_final": None if base is None else float(base[-1]),
    }
    artifact.timings["total"] = time.perf_counter() - t0
    finalize(artifact, config)
    return artifact


def cmd_mpc(config: RunConfig, out_dir: str | Path) -> RunArtifact:
    """Closed-loop receding-horizon run with falsification logging."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifact = RunArtifact(out)
    t0 = time.perf_counter()
    if config.get("plant.kind", "pendulum") != "pendulum":
        raise ConfigError("closed-loop runs are configured for the pendulum plant")
    setup = build_setup(config)
    seed = config.get_int("seed", 0)
    rng = np.random.default_rng(seed + 37)

    if config.get_bool("mpc.certify", False):
        n_samples, _ = certified_count(config, setup, rng)
    else:
        n_samples = config.get_int("mpc.n_samples", 15)

    setup = pendulum_control_setup(
        setup, horizon=config.get_int("mpc.horizon", 20),
        terminal_seed=seed + 101,
    )
    ocp = setup.ocp
    if config.get_int("mpc.sqp_iters", 1) != ocp.sqp_iterations:
        from dataclasses import replace

        ocp = replace(ocp, sqp_iterations=config.get_int("mpc.sqp_iters", 1))
    sample_set = pendulum_sample_set(setup, n_samples, master_seed=seed,
                                     cap=config.get_int("mpc.sample_cap", 100))
    steps = config.get_int("mpc.steps", 80)
    x0 = np.asarray(config.get_floats("x0"))
    log = receding_horizon(ocp, setup.plant, x0, steps, sample_set,
                           lcfg=setup.lipschitz, budget=setup.budget,
                           record_predictions=config.get_bool("mpc.snapshots", False))

    n_x, n_u = setup.model.n_x, setup.model.n_u
    run_rows = []
    for k in range(len(log.states)):
        x = log.states[k]
        u = log.inputs[k] if k < len(log.inputs) else [None] * n_u
        cost = log.stage_costs[k] if k < len(log.stage_costs) else None
        run_rows.append((k, *x, *u, cost, log.n_active[k], log.feasible[k],
                         log.objectives[k]))
    write_csv(artifact.path("runlog.csv"),
              ["k"] + [f"x{i}" for i in range(n_x)] + [f"u{i}" for i in range(n_u)]
              + ["cost", "n_active", "feasible", "J_star"], run_rows)
    artifact.files.append("runlog.csv")
    write_csv(artifact.path("removals.csv"), ["time", "index", "stage", "deviation"],
              [(r.time, r.index, r.stage, r.deviation) for r in log.removals])
    artifact.files.append("removals.csv")
    if log.predictions:
        snap_rows = [
            (k, n, i, *snap[n][i])
            for k, snap in enumerate(log.predictions)
            for n in sorted(snap) for i in range(snap[n].shape[0])
        ]
        write_csv(artifact.path("snapshots.csv"),
                  ["k", "n", "i"] + [f"x{j}" for j in range(n_x)], snap_rows)
        artifact.files.append("snapshots.csv")

    artifact.summary = {
        "n_samples": n_samples,
        "steps_completed": log.steps,
        "halted": log.halted,
        "feasible_fraction": float(np.mean(log.feasible)),
        "final_state": [float(v) for v in log.states[-1]],
        "average_cost": average_cost(log) if log.stage_costs else None,
        "decrease_bound": log.decrease_bound,
        "n_active_final": log.n_active[-1],
        "removals": len(log.removals),
    }
    artifact.timings["total"] = time.perf_counter() - t0
    finalize(artifact, config)
    return artifact
