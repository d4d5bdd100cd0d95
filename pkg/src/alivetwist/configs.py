"""JSON run-configuration parsing for the command-line tools.

Configurations are plain JSON objects with named sections; every parser here
validates eagerly and raises ConfigError with the offending key so the CLI
can fail with a usage error instead of a traceback.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional

from .kernels import AbcKernel
from .models import (
    HmmModel,
    LinearGaussianParams,
    StochasticVolatilityParams,
    lg_model,
    sv_model,
)
from .smc import DEFAULT_TRIAL_CAP


class ConfigError(ValueError):
    """A configuration file is missing or malformed."""


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            config = json.load(handle)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}") from err
    if not isinstance(config, dict):
        raise ConfigError(f"{path} must contain a JSON object at the top level")
    return config


def _section(config: dict, name: str) -> dict:
    section = config.get(name)
    if not isinstance(section, dict):
        raise ConfigError(f"missing or malformed '{name}' section")
    return section


def _number(section: dict, key: str, default=None, required: bool = False) -> Optional[float]:
    if key not in section:
        if required:
            raise ConfigError(f"missing required key '{key}'")
        return default
    value = section[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"key '{key}' must be a number, got {value!r}")
    return float(value)


def _integer(section: dict, key: str, default=None, required: bool = False) -> Optional[int]:
    value = _number(section, key, default, required)
    if value is None:
        return None
    if value != int(value):
        raise ConfigError(f"key '{key}' must be an integer, got {value!r}")
    return int(value)


def parse_model(config: dict):
    """The parameter object described by the 'model' section."""
    section = _section(config, "model")
    kind = section.get("kind")
    if kind == "linear_gaussian":
        return LinearGaussianParams(
            phi=_number(section, "phi", required=True),
            nu2=_number(section, "nu2", required=True),
            tau2=_number(section, "tau2", required=True),
        )
    if kind == "stochastic_volatility":
        return StochasticVolatilityParams(
            F=_number(section, "F", required=True),
            nu2=_number(section, "nu2", required=True),
            alpha=_number(section, "alpha", required=True),
            beta=_number(section, "beta", 0.0),
            gamma=_number(section, "gamma", required=True),
            delta=_number(section, "delta", 0.0),
        )
    raise ConfigError(f"unknown model kind {kind!r}")


def build_model(params) -> HmmModel:
    if isinstance(params, LinearGaussianParams):
        return lg_model(params)
    if isinstance(params, StochasticVolatilityParams):
        return sv_model(params)
    raise ConfigError(f"no model builder for {type(params).__name__}")


def parse_kernel(config: dict) -> AbcKernel:
    section = _section(config, "kernel")
    try:
        return AbcKernel(
            epsilon=_number(section, "epsilon", required=True),
            mode=section.get("mode", "relative"),
            relative_floor=_number(section, "relative_floor", 1e-8),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int
    cap: int
    lag: int

    def __post_init__(self) -> None:
        if self.n_particles < 2:
            raise ConfigError(f"n_particles must be at least 2, got {self.n_particles}")
        if self.cap < self.n_particles:
            raise ConfigError("cap must be at least n_particles")
        if self.lag < 0:
            raise ConfigError(f"lag must be nonnegative, got {self.lag}")


def parse_filter(config: dict) -> FilterConfig:
    section = _section(config, "filter")
    return FilterConfig(
        n_particles=_integer(section, "n_particles", required=True),
        cap=_integer(section, "cap", DEFAULT_TRIAL_CAP),
        lag=_integer(section, "lag", 0),
    )


@dataclass(frozen=True)
class GridConfig:
    """Variance-comparison sweep over latent/observation noise scales."""

    phi: float
    nu2_values: List[float]
    tau2_values: List[float]
    replicates: int
    steps: int
    n_particles: int
    epsilon: float
    lag: int
    cap: int
    mode: str

    def __post_init__(self) -> None:
        if self.replicates < 2:
            raise ConfigError(f"replicates must be at least 2, got {self.replicates}")
        if not self.nu2_values or not self.tau2_values:
            raise ConfigError("nu2_values and tau2_values must be nonempty")
        if self.steps < 1:
            raise ConfigError("steps must be positive")


def parse_grid(config: dict) -> GridConfig:
    section = _section(config, "grid")
    for key in ("nu2_values", "tau2_values"):
        values = section.get(key)
        if not isinstance(values, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 for v in values
        ):
            raise ConfigError(f"key '{key}' must be a list of positive numbers")
    return GridConfig(
        phi=_number(section, "phi", required=True),
        nu2_values=[float(v) for v in section["nu2_values"]],
        tau2_values=[float(v) for v in section["tau2_values"]],
        replicates=_integer(section, "replicates", required=True),
        steps=_integer(section, "steps", required=True),
        n_particles=_integer(section, "n_particles", required=True),
        epsilon=_number(section, "epsilon", required=True),
        lag=_integer(section, "lag", 5),
        cap=_integer(section, "cap", DEFAULT_TRIAL_CAP),
        mode=section.get("mode", "relative"),
    )


@dataclass(frozen=True)
class PmmhConfig:
    """One posterior-sampling run for the volatility model."""

    iterations: int
    n_particles: int
    epsilon: float
    lag: int
    cap: int
    alpha: float
    beta: float
    delta: float
    burn_in_fraction: float
    acf_max_lag: int
    mode: str
    steps: Optional[int] = None

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if not 0 <= self.burn_in_fraction < 1:
            raise ConfigError("burn_in_fraction must be in [0, 1)")
        if self.acf_max_lag < 1:
            raise ConfigError("acf_max_lag must be positive")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be positive when given")

    @property
    def burn_in(self) -> int:
        return int(self.burn_in_fraction * self.iterations)


def parse_pmmh(config: dict) -> PmmhConfig:
    section = _section(config, "pmmh")
    return PmmhConfig(
        iterations=_integer(section, "iterations", required=True),
        n_particles=_integer(section, "n_particles", required=True),
        epsilon=_number(section, "epsilon", required=True),
        lag=_integer(section, "lag", 5),
        cap=_integer(section, "cap", DEFAULT_TRIAL_CAP),
        alpha=_number(section, "alpha", required=True),
        beta=_number(section, "beta", 0.0),
        delta=_number(section, "delta", 0.0),
        burn_in_fraction=_number(section, "burn_in_fraction", 0.1),
        acf_max_lag=_integer(section, "acf_max_lag", 50),
        mode=section.get("mode", "relative"),
        steps=_integer(section, "steps"),
    )
