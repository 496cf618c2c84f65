"""Units, actuator parameters and small numeric primitives shared by the package.

Unit conventions
----------------
Force-model evaluation uses millimetres (z), psi gauge (P), newtons (F) and
seconds. Valve-flow computations use psi absolute inside the orifice law and
litres per minute for flow. Conversions happen only through the helpers below.
"""

import configparser
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

MM3_PER_LITRE = 1.0e6
SECONDS_PER_MINUTE = 60.0
# 1 m^3/s expressed in L/min
LPM_PER_M3S = 1.0e3 * SECONDS_PER_MINUTE


class SoftBladderError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SoftBladderError):
    pass


class IntegrationError(SoftBladderError):
    """Raised when a derivative evaluates to a non-finite value."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class FitError(SoftBladderError):
    pass


def lpm_to_mm3s(q_lpm):
    return q_lpm * MM3_PER_LITRE / SECONDS_PER_MINUTE


def mm3s_to_lpm(q_mm3s):
    return q_mm3s * SECONDS_PER_MINUTE / MM3_PER_LITRE


@dataclass(frozen=True)
class ActuatorParams:
    """Geometry, supply and valve constants of one bladder actuator.

    Pressures are psi gauge except ``atmospheric_pressure`` (psi absolute).
    ``valve_constant`` is the product 2*K*f_T of the orifice law; the vendor
    value is not published, so it is a free calibration constant.
    ``bound_factor`` scales the force model and volume into the upper/lower
    estimates used by the sliding-mode bounds.
    """

    supply_pressure: float = 10.0
    atmospheric_pressure: float = 14.7
    stroke: float = 20.0
    top_area: float = 10000.0
    rest_volume: float = None
    valve_constant: float = 1.0
    pwm_frequency: float = 40.0
    bound_factor: float = 0.2
    # Bladder plate mass and damping lump; position-driven plant never uses them.
    plate_mass: float = None
    damping: float = None

    def __post_init__(self):
        if self.rest_volume is None:
            object.__setattr__(self, "rest_volume", self.top_area * 25.0)
        if self.supply_pressure <= 0:
            raise ConfigError("supply_pressure must be positive")
        if self.atmospheric_pressure <= 0:
            raise ConfigError("atmospheric_pressure must be positive")
        if self.stroke <= 0:
            raise ConfigError("stroke must be positive")
        if self.top_area <= 0:
            raise ConfigError("top_area must be positive")
        if self.volume(self.stroke) <= 0:
            raise ConfigError("volume at full compression must stay positive")
        if not 10.0 <= self.pwm_frequency <= 50.0:
            raise ConfigError("pwm_frequency must lie in [10, 50] Hz")
        if not 0.0 < self.bound_factor < 1.0:
            raise ConfigError("bound_factor must lie in (0, 1)")
        if self.valve_constant <= 0:
            raise ConfigError("valve_constant must be positive")

    def volume(self, z):
        """Bladder volume in mm^3 at compression ``z`` (mm)."""
        return self.rest_volume - self.top_area * z

    def to_absolute(self, p_gauge):
        return p_gauge + self.atmospheric_pressure

    def to_gauge(self, p_abs):
        return p_abs - self.atmospheric_pressure

    @property
    def supply_absolute(self):
        return self.supply_pressure + self.atmospheric_pressure

    def with_(self, **changes):
        return replace(self, **changes)


# Simulated bench calibration. Neither constant is published: valve_constant
# sets full-open averaged flows to tens of L/min; a 40 mm rest height keeps
# the bladder from collapsing to a fifth of its volume at full stroke.
BENCH_VALVE_CONSTANT = 1500.0
BENCH_REST_HEIGHT = 40.0  # mm


def bench_params(**overrides):
    """Actuator parameters of the simulated test bench."""
    kwargs = {"valve_constant": BENCH_VALVE_CONSTANT}
    kwargs.update(overrides)
    if "rest_volume" not in kwargs:
        kwargs["rest_volume"] = kwargs.get("top_area", 10000.0) * BENCH_REST_HEIGHT
    return ActuatorParams(**kwargs)


def rk4_step(fn, t, y, dt):
    """One classical Runge-Kutta step of ``y' = fn(t, y)``."""
    k1 = fn(t, y)
    k2 = fn(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = fn(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = fn(t + dt, y + dt * k3)
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise IntegrationError(f"non-finite derivative at state {y!r}", state=y)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_step(state, derivative_fn, dt):
    """Advance an autonomous scalar ODE ``x' = derivative_fn(x)`` by one RK4 step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return rk4_step(lambda _t, x: derivative_fn(x), 0.0, state, dt)


def lowpass_alpha(cutoff, dt):
    if cutoff <= 0 or dt <= 0:
        raise ValueError("cutoff and dt must be positive")
    return dt / (dt + 1.0 / (2.0 * math.pi * cutoff))


def lowpass_filter(previous_output, value, cutoff, dt):
    """First-order discrete low-pass update ``y += alpha*(u - y)``."""
    alpha = lowpass_alpha(cutoff, dt)
    return previous_output + alpha * (value - previous_output)


def error_stats(errors):
    """Mean and population standard deviation of the absolute error.

    Parameters
    ----------
    errors : array_like
        Signed tracking errors in N.

    Returns
    -------
    mean_abs, std_abs : float
    """
    e = np.abs(np.asarray(errors, dtype=float).ravel())
    if e.size == 0:
        raise ValueError("error_stats needs at least one sample")
    return float(e.mean()), float(e.std(ddof=0))


# --- configuration file ----------------------------------------------------

_ACTUATOR_SECTION = "actuator"


def _coerce(value):
    text = value.strip()
    if text.lower() in ("", "none"):
        return None
    return float(text)


def read_config(path):
    """Read an INI-style configuration file into a ``ConfigParser``."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    return parser


def params_from_config(parser):
    if not parser.has_section(_ACTUATOR_SECTION):
        return bench_params()
    known = {f.name for f in fields(ActuatorParams)}
    kwargs = {}
    for key, value in parser.items(_ACTUATOR_SECTION):
        if key not in known:
            raise ConfigError(f"unknown actuator key {key!r}")
        kwargs[key] = _coerce(value)
    return bench_params(**kwargs)


def params_to_config(params, parser=None):
    parser = parser or configparser.ConfigParser()
    parser[_ACTUATOR_SECTION] = {
        k: ("none" if v is None else repr(float(v))) for k, v in asdict(params).items()
    }
    return parser
