"""gp-reach: certificates, reachable tubes, and closed-loop runs.

Exit codes: 0 success, 2 configuration error, 3 infeasible optimal
control problem, 4 certificate violated (sample set emptied), 5
numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, default_config
from .gp import FactorizationError
from .mpc import CertificateViolated, OcpInfeasible
from .pipelines import CensoredEstimate, cmd_complexity, cmd_mpc, cmd_reach

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_CERTIFICATE = 4
EXIT_NUMERICAL = 5


def _load_config(args, experiment: str) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
        cfg.set("experiment", experiment)
    else:
        cfg = default_config(experiment, args.plant)
    cfg.set("plant.kind", args.plant)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    return cfg


def _add_common(parser: argparse.ArgumentParser, default_out: str) -> None:
    parser.add_argument("--config", help="run configuration file (dotted keys)")
    parser.add_argument("--plant", choices=("pendulum", "car"), default="pendulum",
                        help="built-in plant to configure")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--out", default=default_out, help="run output directory")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gp-reach",
        description="Finite-sample GP reachability and sampling-based robust MPC",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_cert = sub.add_parser("complexity", help="certify sample counts over an eps list")
    _add_common(p_cert, "runs/complexity")
    p_cert.add_argument("--eps", type=float, action="append", default=None,
                        help="closeness tolerance (repeatable)")
    p_cert.add_argument("--delta", type=float, default=None, help="failure probability")
    p_cert.add_argument("--bg", type=float, default=None,
                        help="override the RKHS norm bound")
    p_cert.add_argument("--mode", choices=("subgaussian", "bounded"), default=None)
    p_cert.add_argument("--draws", type=int, default=None,
                        help="Monte Carlo draws for the small-ball estimate")
    p_cert.add_argument("--allow-censored", action="store_true",
                        help="emit censored estimates instead of failing")

    p_reach = sub.add_parser("reach", help="build a reachable tube for a stored input sequence")
    _add_common(p_reach, "runs/reach")
    p_reach.add_argument("--n-samples", type=int, default=None)
    p_reach.add_argument("--certify", action="store_true",
                         help="take the sample count from the certificate")
    p_reach.add_argument("--eps", type=float, default=None)
    p_reach.add_argument("--horizon", type=int, default=None)
    p_reach.add_argument("--baseline", action="store_true",
                         help="also propagate the sequential worst-case baseline")

    p_mpc = sub.add_parser("mpc-run", help="closed-loop receding-horizon run")
    _add_common(p_mpc, "runs/mpc")
    p_mpc.add_argument("--steps", type=int, default=None, help="closed-loop steps")
    p_mpc.add_argument("--n-samples", type=int, default=None)
    p_mpc.add_argument("--certify", action="store_true",
                       help="take the sample count from the certificate")
    p_mpc.add_argument("--sqp-iters", type=int, default=None,
                       help="SQP iterations per control step")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> None:
    cmd = args.command
    if cmd == "complexity":
        if args.eps:
            cfg.set("cert.eps", args.eps)
        if args.delta is not None:
            cfg.set("cert.delta", args.delta)
        if args.bg is not None:
            cfg.set("gp.norm_bound", args.bg)
        if args.mode is not None:
            cfg.set("cert.mode", args.mode)
        if args.draws is not None:
            cfg.set("cert.draws", args.draws)
        if args.allow_censored:
            cfg.set("cert.allow_censored", True)
    elif cmd == "reach":
        if args.eps is not None:
            cfg.set("cert.eps", [args.eps])
        if args.n_samples is not None:
            cfg.set("reach.n_samples", args.n_samples)
        if args.certify:
            cfg.set("reach.certify", True)
        if args.horizon is not None:
            cfg.set("reach.horizon", args.horizon)
        if args.baseline:
            cfg.set("reach.baseline", True)
    elif cmd == "mpc-run":
        if args.steps is not None:
            cfg.set("mpc.steps", args.steps)
        if args.n_samples is not None:
            cfg.set("mpc.n_samples", args.n_samples)
        if args.certify:
            cfg.set("mpc.certify", True)
        if args.sqp_iters is not None:
            cfg.set("mpc.sqp_iters", args.sqp_iters)


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    experiment = {"complexity": "complexity", "reach": "reach", "mpc-run": "mpc"}[args.command]
    try:
        cfg = _load_config(args, experiment)
        _apply_overrides(cfg, args)
    except (ConfigError, OSError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out)
    try:
        if args.command == "complexity":
            artifact = cmd_complexity(cfg, out_dir)
        elif args.command == "reach":
            artifact = cmd_reach(cfg, out_dir)
        else:
            artifact = cmd_mpc(cfg, out_dir)
            if artifact.summary.get("halted"):
                reason = artifact.summary["halted"]
                print(f"run halted: {reason}", file=sys.stderr)
                return EXIT_CERTIFICATE if "certificate" in reason else EXIT_INFEASIBLE
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except CensoredEstimate as err:
        print(f"certification refused: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OcpInfeasible as err:
        print(f"infeasible optimal control problem: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except CertificateViolated as err:
        print(f"certificate violated: {err}", file=sys.stderr)
        return EXIT_CERTIFICATE
    except (FactorizationError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"run complete: {out_dir} ({len(artifact.files)} files)")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
