"""Valve flow physics, PWM duty-cycle maps and their inverses.

Pressures at this module's public surface are psi gauge; inside the orifice
square roots they are converted to psi absolute. Flows are L/min, signed
positive into the bladder.

Each duty map is a power law ``DC = a * x**b + c`` of the flow-resistance
ratio ``x = valve_constant * sqrt(dP * P_down) / Q`` (the effective Lohms).
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .core import FitError, SoftBladderError

SONIC_RATIO = 1.9

INPUT = "input"
OUTPUT = "output"
HOLD = "hold"
DIRECTIONS = (INPUT, OUTPUT, HOLD)

AVERAGED = "averaged"
DISCRETE = "discrete"


class SonicFlowError(SoftBladderError):
    """Pressure ratio outside the subsonic validity region of the orifice law."""


class NoFlowError(SoftBladderError):
    """No pressure differential available for the requested flow direction."""


@dataclass(frozen=True)
class PowerMap:
    """``DC = a * x**b + c`` with ``a > 0``, ``b < 0`` and floor ``c`` in percent."""

    a: float
    b: float
    c: float

    def __post_init__(self):
        if not (self.a > 0 and self.b < 0 and 0 <= self.c < 100):
            raise ValueError(f"invalid power map coefficients {self}")

    def duty(self, x):
        """Unclamped duty cycle for flow ratio ``x``."""
        return self.a * np.power(x, self.b) + self.c

    def ratio(self, duty):
        """Flow ratio producing ``duty``; infinite at or below the floor."""
        excess = duty - self.c
        if excess <= 0:
            return math.inf
        return (excess / self.a) ** (1.0 / self.b)

    def as_tuple(self):
        return (self.a, self.b, self.c)


@dataclass(frozen=True)
class FlowModelCoeffs:
    out_map: PowerMap = field(default_factory=lambda: PowerMap(7245.0, -0.7814, 12.6))
    in_map: PowerMap = field(default_factory=lambda: PowerMap(6000.0, -0.7, 16.0))


@dataclass(frozen=True)
class ValveCommand:
    duty_cycle: float = 0.0
    direction: str = HOLD

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown valve direction {self.direction!r}")
        duty = 0.0 if self.direction == HOLD else min(max(float(self.duty_cycle), 0.0), 100.0)
        object.__setattr__(self, "duty_cycle", duty)


HOLD_COMMAND = ValveCommand()


def orifice_flow(p_up, p_down, lohms, valve_constant, clip_sonic=False):
    """Subsonic orifice flow in L/min between absolute pressures (psi).

    With ``clip_sonic`` the upstream pressure is capped at the sonic boundary
    instead of raising, which keeps a simulation running through brief
    excursions outside the model's validity region.
    """
    if p_down <= 0:
        raise ValueError("downstream absolute pressure must be positive")
    if lohms <= 0:
        raise ValueError("lohms must be positive")
    if p_up < p_down:
        raise ValueError("upstream pressure below downstream pressure")
    if p_up / p_down >= SONIC_RATIO:
        if not clip_sonic:
            raise SonicFlowError(f"pressure ratio {p_up / p_down:.3f} >= {SONIC_RATIO}")
        p_up = SONIC_RATIO * p_down
    return valve_constant / lohms * math.sqrt((p_up - p_down) * p_down)


def _exhaust_reference(P, params):
    # unit-Lohm exhaust flow; bladder upstream, atmosphere downstream
    return params.valve_constant * math.sqrt(P * params.atmospheric_pressure)


def _fill_reference(P, params):
    p_abs = P + params.atmospheric_pressure
    return params.valve_constant * math.sqrt((params.supply_pressure - P) * p_abs)


def output_flow_ratio(Q_des, P, params):
    if Q_des <= 0:
        raise ValueError("desired flow magnitude must be positive")
    if P <= 0:
        raise NoFlowError("cannot exhaust at or below atmospheric pressure")
    return _exhaust_reference(P, params) / Q_des


def input_flow_ratio(Q_des, P, params):
    if Q_des <= 0:
        raise ValueError("desired flow magnitude must be positive")
    if P >= params.supply_pressure:
        raise NoFlowError("bladder pressure at or above supply pressure")
    return _fill_reference(P, params) / Q_des


def duty_for_output_flow(Q_des, P, params, coeffs=None):
    """Exhaust duty cycle (percent, clamped) for flow magnitude ``Q_des``."""
    coeffs = coeffs or FlowModelCoeffs()
    x = output_flow_ratio(Q_des, P, params)
    return float(min(max(coeffs.out_map.duty(x), 0.0), 100.0))


def duty_for_input_flow(Q_des, P, params, coeffs=None):
    """Fill duty cycle (percent, clamped) for flow ``Q_des``."""
    coeffs = coeffs or FlowModelCoeffs()
    x = input_flow_ratio(Q_des, P, params)
    return float(min(max(coeffs.in_map.duty(x), 0.0), 100.0))


def full_open_lohms(coeffs):
    """Per-valve full-open resistance ``(input, output)`` for the discrete model.

    The output map describes both exhaust valves together, so one exhaust valve
    carries twice the combined resistance.
    """
    return coeffs.in_map.ratio(100.0), 2.0 * coeffs.out_map.ratio(100.0)


def realized_flow(command, P, params, coeffs=None, mode=AVERAGED, phase=0.0, clip_sonic=False):
    """Flow (L/min, positive into the bladder) produced by a valve command.

    ``averaged`` inverts the fitted duty map; ``discrete`` returns the
    full-open orifice flow while ``phase`` (fraction of the PWM period) is
    below the duty fraction. Without a pressure differential the flow is zero.
    """
    coeffs = coeffs or FlowModelCoeffs()
    duty = command.duty_cycle
    if command.direction == HOLD or duty <= 0.0:
        return 0.0
    if command.direction == OUTPUT:
        if P <= 0:
            return 0.0
        sign = -1.0
        power_map = coeffs.out_map
    else:
        if P >= params.supply_pressure:
            return 0.0
        sign = 1.0
        power_map = coeffs.in_map

    if mode == AVERAGED:
        x = power_map.ratio(duty)
        if math.isinf(x):
            return 0.0
        ref = _exhaust_reference(P, params) if sign < 0 else _fill_reference(P, params)
        return sign * ref / x
    if mode != DISCRETE:
        raise ValueError(f"unknown flow mode {mode!r}")

    if (phase % 1.0) >= duty / 100.0:
        return 0.0
    lohms_in, lohms_out = full_open_lohms(coeffs)
    p_abs = P + params.atmospheric_pressure
    if sign < 0:
        # two exhaust valves in parallel
        q = orifice_flow(p_abs, params.atmospheric_pressure, lohms_out,
                         2.0 * params.valve_constant, clip_sonic)
    else:
        q = orifice_flow(params.supply_absolute, p_abs, lohms_in,
                         params.valve_constant, clip_sonic)
    return sign * q


def route_flow(Q_des, P, params, coeffs=None):
    """Turn a signed desired flow into a :class:`ValveCommand`.

    Returns ``(command, flags)`` where flags is a set of strings such as
    ``"saturated"`` (duty clamped at 100) or ``"no_flow"`` (no differential).
    """
    coeffs = coeffs or FlowModelCoeffs()
    flags = set()
    if Q_des == 0.0:
        return HOLD_COMMAND, flags
    try:
        if Q_des > 0:
            raw = coeffs.in_map.duty(input_flow_ratio(Q_des, P, params))
            direction = INPUT
        else:
            raw = coeffs.out_map.duty(output_flow_ratio(-Q_des, P, params))
            direction = OUTPUT
    except NoFlowError:
        flags.add("no_flow")
        return HOLD_COMMAND, flags
    if raw > 100.0:
        flags.add("saturated")
    return ValveCommand(raw, direction), flags


# --- power-map identification ------------------------------------------------

B_RANGE = (-2.0, -0.1)
C_RANGE = (0.0, 50.0)


def _best_on_grid(x, y, b_values, c_values):
    # closed-form a for every (b, c): a = sum((y - c) x^b) / sum(x^2b)
    xb = np.power(x[None, :], b_values[:, None])  # (nb, n)
    sxx = np.sum(xb * xb, axis=1)  # (nb,)
    sxy = xb @ y  # (nb,)
    sx = np.sum(xb, axis=1)
    a = (sxy[:, None] - c_values[None, :] * sx[:, None]) / sxx[:, None]  # (nb, nc)
    a = np.maximum(a, 1e-12)
    pred = a[:, :, None] * xb[:, None, :] + c_values[None, :, None]
    rmse = np.sqrt(np.mean((pred - y[None, None, :]) ** 2, axis=2))
    i, j = np.unravel_index(np.argmin(rmse), rmse.shape)
    return a[i, j], b_values[i], c_values[j], rmse[i, j]


def fit_power_map(x, duty, n_grid=41, refinements=2, b_range=B_RANGE, c_range=C_RANGE):
    """RMSE search for ``(a, b, c)`` of ``duty = a * x**b + c``.

    Coarse-to-fine grid over ``(b, c)``; each refinement shrinks the window to
    two coarse steps around the incumbent and resolves it ten times finer.
    ``a`` is solved in closed form at every grid point.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(duty, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("x and duty lengths differ")
    if x.size < 3:
        raise FitError("power-map fit needs at least 3 points")
    if np.any(x <= 0):
        raise ValueError("flow ratios must be positive")
    if np.ptp(x) == 0:
        raise FitError("all flow ratios are equal; power map is unidentifiable")

    b_lo, b_hi = b_range
    c_lo, c_hi = c_range
    b_step = (b_hi - b_lo) / (n_grid - 1)
    c_step = (c_hi - c_lo) / (n_grid - 1)
    b_values = np.linspace(b_lo, b_hi, n_grid)
    c_values = np.linspace(c_lo, c_hi, n_grid)
    a, b, c, rmse = _best_on_grid(x, y, b_values, c_values)
    for _ in range(refinements):
        b_values = np.linspace(b - b_step, b + b_step, 21)
        c_values = np.linspace(max(c - c_step, c_lo), min(c + c_step, c_hi), 21)
        b_values = b_values[b_values < 0]
        b_step /= 10.0
        c_step /= 10.0
        a, b, c, rmse = _best_on_grid(x, y, b_values, c_values)
    return float(a), float(b), float(c)


def power_map_rmse(x, duty, coefficients):
    a, b, c = coefficients
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean((a * np.power(x, b) + c - np.asarray(duty)) ** 2)))


class PowerMapRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn wrapper around :func:`fit_power_map`.

    ``X`` is a single column of flow ratios, ``y`` the duty cycle in percent.
    """

    def __init__(self, n_grid=41, refinements=2):
        self.n_grid = n_grid
        self.refinements = refinements

    def fit(self, X, y):
        X = np.asarray(X, dtype=float).reshape(len(y), -1)
        if X.shape[1] != 1:
            raise ValueError("X must be a single column of flow ratios")
        self.coef_ = fit_power_map(X[:, 0], y, self.n_grid, self.refinements)
        self.power_map_ = PowerMap(*self.coef_)
        return self

    def predict(self, X):
        check_is_fitted(self, "power_map_")
        X = np.asarray(X, dtype=float).reshape(-1)
        return self.power_map_.duty(X)


def synthetic_flow_sweep(direction, params, coeffs=None, duties=None, pressures=None,
                         flow_noise_std=0.0, seed=0):
    """Bench-style valve characterization: realized flow at a grid of duties.

    For every ``(duty, P)`` pair the averaged valve model produces a flow,
    optionally perturbed by relative Gaussian noise, which is converted to
    the flow ratio the duty map is fitted on. Returns columns
    ``(P, duty, Q, x)`` with ``Q`` as a magnitude in L/min.
    """
    if direction not in (INPUT, OUTPUT):
        raise ValueError("direction must be 'input' or 'output'")
    coeffs = coeffs or FlowModelCoeffs()
    power_map = coeffs.in_map if direction == INPUT else coeffs.out_map
    if duties is None:
        duties = np.linspace(power_map.c + 4.0, 100.0, 12)
    if pressures is None:
        pressures = np.linspace(1.0, params.supply_pressure - 1.0, 5)
    rng = np.random.default_rng(seed)
    rows = []
    for P in pressures:
        for duty in duties:
            q = abs(realized_flow(ValveCommand(duty, direction), P, params, coeffs))
            if q <= 0:
                continue
            q *= 1.0 + flow_noise_std * rng.standard_normal()
            ratio = (input_flow_ratio if direction == INPUT else output_flow_ratio)(q, P, params)
            rows.append((P, duty, q, ratio))
    if not rows:
        raise FitError("flow sweep produced no flow; check duties and pressures")
    return np.array(rows)


def write_flow_map_csv(path, x, duty):
    """Flow-map dataset with header ``x_ratio,duty_pct``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_ratio", "duty_pct"])
        for row in zip(np.ravel(x), np.ravel(duty)):
            w.writerow([repr(float(v)) for v in row])


def read_flow_map_csv(path):
    """``(x, duty)`` arrays from a flow-map CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["x_ratio", "duty_pct"]:
            raise ValueError(f"{path}: expected header x_ratio,duty_pct")
        rows = [(float(r["x_ratio"]), float(r["duty_pct"])) for r in reader]
    if not rows:
        return np.empty(0), np.empty(0)
    x, duty = zip(*rows)
    return np.array(x), np.array(duty)
