"""Simulation configuration: defaults, flat-file parsing, validation.

The config file format is one `key = value` assignment per line with `#`
comments. Unknown keys are errors; missing keys take the channel-flow
defaults below (a=5, b=2, rho=1, nu=0.04, sigma0=30, u0=0, amplitude 20,
epsilon=2e-4, T=4.8e4). Fractions like `1/32` are accepted for floats.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import InvariantViolation, ParseError, UnknownKey
from .fem import FlowParams, pulsatile_inflow
from .growth import GrowthParams
from .meshing import GaussianBump

FLOW_MODELS = ("navier_stokes", "zero")
SHAPES = ("gaussian",)


@dataclass(frozen=True)
class SimConfig:
    # geometry
    a: float = 5.0
    b: float = 2.0
    nx: int = 71
    ny: int = 3
    shape: str = "gaussian"
    # flow
    rho: float = 1.0
    nu: float = 0.04
    amplitude: float = 20.0
    # growth
    epsilon: float = 2e-4
    sigma0: float = 30.0
    dT: float = 2000.0
    dt: float = 1.0 / 32.0
    T: float = 4.8e4
    u0: float = 0.0
    # tolerances
    tau: float = 1e-6
    picard_tol: float = 1e-9
    max_cycles: int = 100
    # flow model, "zero" stubs the solver for growth-only runs
    flow_model: str = "navier_stokes"
    # output
    out: str = "out"
    snapshots: tuple = ()

    def validate(self) -> "SimConfig":
        if self.a <= 0 or self.b <= 0:
            raise InvariantViolation("a and b must be positive")
        if self.nx < 1 or self.ny < 1:
            raise InvariantViolation("nx and ny must be at least 1")
        if self.shape not in SHAPES:
            raise InvariantViolation(f"shape must be one of {SHAPES}")
        if self.rho <= 0 or self.nu <= 0:
            raise InvariantViolation("rho and nu must be positive")
        if self.amplitude < 0:
            raise InvariantViolation("amplitude must be nonnegative")
        if self.epsilon <= 0:
            raise InvariantViolation("epsilon must be positive")
        if self.sigma0 <= 0:
            raise InvariantViolation("sigma0 must be positive")
        if self.dT < 1:
            raise InvariantViolation("dT must be at least one period")
        if not 0 < self.dt <= 1:
            raise InvariantViolation("dt must lie in (0, 1]")
        n = round(1.0 / self.dt)
        if n < 1 or abs(n * self.dt - 1.0) > 1e-9:
            raise InvariantViolation("1/dt must be an integer")
        if self.T <= 0:
            raise InvariantViolation("T must be positive")
        m = self.T / self.dT
        if abs(round(m) - m) > 1e-9 * max(1.0, m) or round(m) < 1:
            raise InvariantViolation("T/dT must be a positive integer")
        if self.u0 < 0:
            raise InvariantViolation("u0 must be nonnegative")
        if self.tau <= 0:
            raise InvariantViolation("tau must be positive")
        if self.picard_tol <= 0:
            raise InvariantViolation("picard_tol must be positive")
        if self.max_cycles < 1:
            raise InvariantViolation("max_cycles must be at least 1")
        if self.flow_model not in FLOW_MODELS:
            raise InvariantViolation(f"flow_model must be one of {FLOW_MODELS}")
        return self

    # -- derived objects ----------------------------------------------------

    @property
    def steps_per_period(self) -> int:
        return round(1.0 / self.dt)

    @property
    def macro_steps(self) -> int:
        return round(self.T / self.dT)

    def flow_params(self) -> FlowParams:
        return FlowParams(
            rho=self.rho,
            nu=self.nu,
            inflow=pulsatile_inflow(self.amplitude, self.b),
        )

    def growth_params(self) -> GrowthParams:
        return GrowthParams(
            epsilon=self.epsilon,
            sigma0=self.sigma0,
            dT=self.dT,
            dt=self.dt,
            T=self.T,
            u0=self.u0,
        )

    def shape_function(self) -> GaussianBump:
        return GaussianBump()

    def with_overrides(self, **kwargs) -> "SimConfig":
        return dataclasses.replace(self, **kwargs).validate()


_FIELDS = {f.name: f for f in dataclasses.fields(SimConfig)}
_INT_KEYS = {"nx", "ny", "max_cycles"}
_STR_KEYS = {"shape", "flow_model", "out"}


def _parse_number(text: str) -> float:
    text = text.strip()
    if "/" in text:
        num, _, den = text.partition("/")
        return float(num) / float(den)
    return float(text)


def parse_value(key: str, text: str):
    if key in _STR_KEYS:
        return text.strip()
    if key == "snapshots":
        text = text.strip()
        if not text:
            return ()
        return tuple(_parse_number(v) for v in text.split(","))
    if key in _INT_KEYS:
        value = _parse_number(text)
        if abs(value - round(value)) > 1e-12:
            raise ValueError(f"{key} must be an integer")
        return int(round(value))
    return _parse_number(text)


def load_config(path) -> SimConfig:
    """Parse a flat key = value file into a validated SimConfig."""
    values = {}
    lines = Path(path).read_text().splitlines()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected 'key = value'", line=lineno)
        key, _, text = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise UnknownKey(key)
        try:
            values[key] = parse_value(key, text)
        except (ValueError, ZeroDivisionError) as exc:
            raise ParseError(f"line {lineno}: {exc}", line=lineno) from exc
    return SimConfig(**values).validate()
