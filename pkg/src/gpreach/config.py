"""Flat dotted-key run configuration files.

The format is one ``key = value`` assignment per line with ``#``
comments; keys are dotted paths (``plant.pendulum.length = 10``), values
are parsed as bool/int/float/string or comma-separated lists thereof.
Emission and parsing round-trip exactly, which keeps run directories
diff-friendly and reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EXPERIMENTS = ("complexity", "reach", "mpc")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _parse_scalar(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [_parse_scalar(t) for t in text.split(",") if t.strip()]
    return _parse_scalar(text)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple, np.ndarray)):
        body = ", ".join(format_value(v) for v in value)
        # a trailing comma keeps single-element lists lists on re-parse
        return body + "," if len(value) == 1 else body
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """Ordered dotted-key mapping with typed accessors."""

    values: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if not key:
                raise ConfigError(f"line {lineno}: empty key")
            values[key] = parse_value(val)
        return cls(values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def emit(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.values.items())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.emit())

    # -- typed access -----------------------------------------------------

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def require(self, key: str):
        if key not in self.values:
            raise ConfigError(f"missing required key '{key}'")
        return self.values[key]

    def get_float(self, key: str, default: float | None = None) -> float:
        val = self.values.get(key, default)
        if val is None:
            raise ConfigError(f"missing required key '{key}'")
        try:
            return float(val)
        except (TypeError, ValueError):
            raise ConfigError(f"key '{key}' must be a number, got {val!r}") from None

    def get_int(self, key: str, default: int | None = None) -> int:
        val = self.values.get(key, default)
        if val is None:
            raise ConfigError(f"missing required key '{key}'")
        if isinstance(val, float) and not val.is_integer():
            raise ConfigError(f"key '{key}' must be an integer, got {val!r}")
        try:
            return int(val)
        except (TypeError, ValueError):
            raise ConfigError(f"key '{key}' must be an integer, got {val!r}") from None

    def get_bool(self, key: str, default: bool = False) -> bool:
        val = self.values.get(key, default)
        if not isinstance(val, bool):
            raise ConfigError(f"key '{key}' must be true/false, got {val!r}")
        return val

    def get_list(self, key: str, default=None) -> list:
        if key not in self.values:
            if default is None:
                raise ConfigError(f"missing required key '{key}'")
            return list(default)
        val = self.values[key]
        return list(val) if isinstance(val, list) else [val]

    def get_floats(self, key: str, default=None) -> list[float]:
        return [float(v) for v in self.get_list(key, default)]

    def set(self, key: str, value) -> None:
        self.values[key] = value

    def validate(self) -> None:
        """Structural checks shared by every experiment kind."""
        kind = self.require("experiment")
        if kind not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {kind!r}")
        for key in ("cert.delta",):
            if key in self.values:
                p = self.get_float(key)
                if not 0.0 < p < 1.0:
                    raise ConfigError(f"key '{key}' must lie in (0, 1), got {p}")
        for key in ("cert.eps", "plant.noise_bound", "gp.noise_scale"):
            if key in self.values:
                for v in self.get_floats(key):
                    if key == "plant.noise_bound":
                        if v < 0:
                            raise ConfigError(f"key '{key}' must be nonnegative")
                    elif v <= 0:
                        raise ConfigError(f"key '{key}' must be positive, got {v}")
        if kind == "complexity" and not self.get_list("cert.eps", []):
            raise ConfigError("complexity runs need a non-empty cert.eps list")


def default_config(experiment: str, plant: str) -> RunConfig:
    """Built-in defaults so subcommand flags alone can drive a run."""
    if plant not in ("pendulum", "car"):
        raise ConfigError(f"unknown plant '{plant}'")
    cfg = RunConfig()
    cfg.set("experiment", experiment)
    cfg.set("plant.kind", plant)
    cfg.set("seed", 0)
    if plant == "pendulum":
        cfg.set("plant.pendulum.length", 10.0)
        cfg.set("plant.pendulum.dt", 0.015)
        cfg.set("plant.noise_bound", 1e-4)
        cfg.set("gp.noise_scale", 7e-4)
        cfg.set("kernel.signal_variance", 0.05)
        cfg.set("kernel.lengthscales", [1.2, 6.0])
        cfg.set("cert.eps", [2e-3])
        cfg.set("cert.delta", 1e-3)
        cfg.set("cert.mode", "bounded")
        cfg.set("mpc.horizon", 20)
        cfg.set("mpc.steps", 80)
        cfg.set("x0", [2.15, 2.3])
    else:
        cfg.set("plant.car.lf", 1.105)
        cfg.set("plant.car.lr", 1.738)
        cfg.set("plant.car.dt", 0.06)
        cfg.set("plant.noise_bound", 1e-6)
        cfg.set("gp.noise_scale", 2e-4)
        cfg.set("kernel.signal_variance", 0.05)
        cfg.set("kernel.lengthscales", [2.0, 1.0])
        cfg.set("cert.eps", [8e-4])
        cfg.set("cert.delta", 0.01)
        cfg.set("cert.mode", "bounded")
        cfg.set("reach.horizon", 20)
        cfg.set("x0", [0.0, 0.0, 0.0, 5.0])
    cfg.set("cert.draws", 20000)
    cfg.set("cert.allow_censored", False)
    cfg.set("reach.n_samples", 60)
    cfg.set("reach.check_rollouts", 100)
    cfg.set("mpc.n_samples", 15)
    cfg.set("mpc.sample_cap", 100)
    cfg.set("mpc.sqp_iters", 1)
    return cfg
