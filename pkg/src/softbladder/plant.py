"""Simulated bladder on a position-controlled test robot.

The robot imposes the compression trajectory, so only the pressure state is
integrated::

    dP_abs/dt = (P_abs / V) * (Q - dV/dt),   V = V0 - A z,   dV/dt = -A zdot

Force is read off the force surface at the current ``(z, P)``.
"""

from dataclasses import dataclass

import numpy as np

from .core import SoftBladderError, lpm_to_mm3s, rk4_step
from .force_model import CompressionDataset, eval_force
from .pneumatics import AVERAGED, FlowModelCoeffs, realized_flow, route_flow

P_ABS_FLOOR = 1e-3  # psi absolute


class GeometryError(SoftBladderError):
    pass


class RegulationError(SoftBladderError):
    def __init__(self, pressure, message=None):
        super().__init__(message or f"could not regulate bladder to {pressure} psi")
        self.pressure = pressure


@dataclass(frozen=True)
class PlantState:
    z: float = 0.0  # mm
    z_dot: float = 0.0  # mm/s
    P: float = 0.0  # psi gauge
    t: float = 0.0  # s
    clamped: bool = False  # absolute pressure hit the vacuum floor this step

    def volume(self, params):
        return params.volume(self.z)


@dataclass(frozen=True)
class CompressionProfile:
    """Ramp from 0 to ``depth`` at ``rate`` with a dwell before and after."""

    rate: float
    depth: float = 20.0
    dwell: float = 0.5

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("compression rate must be positive")
        if self.depth <= 0:
            raise ValueError("compression depth must be positive")

    @property
    def ramp_time(self):
        return self.depth / self.rate

    @property
    def duration(self):
        return 2.0 * self.dwell + self.ramp_time

    def position(self, t):
        return float(np.clip((t - self.dwell) * self.rate, 0.0, self.depth))

    def in_ramp(self, t):
        return self.dwell <= t <= self.dwell + self.ramp_time


class SensorModel:
    """Gaussian force/pressure sensor noise with a reproducible stream."""

    _BLOCK = 4096

    def __init__(self, force_noise_std=0.5, pressure_noise_std=0.05, seed=0):
        if force_noise_std < 0 or pressure_noise_std < 0:
            raise ValueError("noise standard deviations must be nonnegative")
        self.force_noise_std = force_noise_std
        self.pressure_noise_std = pressure_noise_std
        self.seed = seed
        self.reset()

    def reset(self):
        self._rng = np.random.default_rng(self.seed)
        self._buf = np.empty(0)
        self._pos = 0

    def _pair(self):
        if self._pos + 2 > self._buf.size:
            self._buf = self._rng.standard_normal(self._BLOCK)
            self._pos = 0
        a, b = self._buf[self._pos], self._buf[self._pos + 1]
        self._pos += 2
        return a, b

    @classmethod
    def noiseless(cls):
        return cls(0.0, 0.0)


def _pressure_rhs(params, state, Q_lpm, z_dot):
    q = lpm_to_mm3s(Q_lpm)
    area = params.top_area
    v0 = params.rest_volume
    z0, t0 = state.z, state.t

    def rhs(t, p_abs):
        v = v0 - area * (z0 + z_dot * (t - t0))
        return p_abs / v * (q + area * z_dot)

    return rhs


def step_plant(state, Q, z_command, dt, params, model=None):
    """Advance the plant by ``dt`` with flow ``Q`` (L/min) held constant.

    The robot moves linearly from ``state.z`` to ``z_command`` over the step.
    Because ``Q`` is frozen over the step, a fill may not carry the pressure
    above supply, nor an exhaust below atmospheric; crossings are clipped.
    ``model`` is accepted for interface symmetry; force is derived on demand.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not -1e-9 <= z_command <= params.stroke + 1e-9:
        raise GeometryError(f"commanded compression {z_command} outside [0, {params.stroke}]")
    z_dot = (z_command - state.z) / dt
    if params.volume(z_command) <= 0 or params.volume(state.z) <= 0:
        raise GeometryError("bladder volume must stay positive")
    p_abs = state.P + params.atmospheric_pressure
    p_next = rk4_step(_pressure_rhs(params, state, Q, z_dot), state.t, p_abs, dt)
    clamped = p_next <= P_ABS_FLOOR
    if clamped:
        p_next = P_ABS_FLOOR
    # add the increment in gauge terms so a zero change stays exactly zero
    P = state.P + (p_next - p_abs)
    # a valve cannot push the bladder past the pressure of the port it opens to
    if Q > 0 and state.P <= params.supply_pressure < P:
        P = params.supply_pressure
    elif Q < 0 and state.P >= 0.0 > P:
        P = 0.0
    return PlantState(z_command, z_dot, P, state.t + dt, clamped)


def measure(state, model, sensors):
    """Noisy force and pressure readings plus the exact robot position."""
    force = eval_force(model, state.z, state.P)
    nf, np_ = sensors._pair()
    return (
        force + sensors.force_noise_std * nf,
        state.P + sensors.pressure_noise_std * np_,
        state.z,
    )


class BladderPlant:
    """Mutable plant instance: state, valve realization and sensors.

    ``damping`` adds a viscous ``b * zdot`` term to the true force only, a
    perturbation the controller's model does not know about.
    """

    def __init__(self, params, model, sensors=None, coeffs=None, mode=AVERAGED,
                 damping=0.0, initial_pressure=0.0):
        self.params = params
        self.model = model
        self.sensors = sensors or SensorModel.noiseless()
        self.coeffs = coeffs or FlowModelCoeffs()
        self.mode = mode
        self.damping = damping
        self.state = PlantState(P=initial_pressure)
        self.clamp_count = 0

    def force(self, state=None):
        s = state or self.state
        return float(eval_force(self.model, s.z, s.P)) + self.damping * s.z_dot

    def flow(self, command, phase=0.0):
        return realized_flow(command, self.state.P, self.params, self.coeffs,
                             self.mode, phase, clip_sonic=True)

    def step(self, command, z_command, dt, phase=0.0):
        Q = self.flow(command, phase)
        self.state = step_plant(self.state, Q, z_command, dt, self.params, self.model)
        self.clamp_count += self.state.clamped
        return Q

    def measure(self):
        f, p, z = measure(self.state, self.model, self.sensors)
        return f + self.damping * self.state.z_dot, p, z


def regulate_flow(target, P, gain):
    """Proportional pressure law: desired flow (L/min) for pressure error."""
    return gain * (target - P)


def run_quasistatic_sweep(params, model, pressures, depth=20.0, rate=0.5, dt=0.01,
                          spacing=1.0, gain=10.0, tolerance=0.02, settle_timeout=30.0,
                          sensors=None, coeffs=None):
    """Slow compressions at a sequence of held pressures.

    For each target the bladder is first regulated at z = 0 until it is within
    ``tolerance`` psi, then compressed to ``depth`` while the proportional law
    keeps regulating. A sample ``(z, P, F)`` is recorded every ``spacing`` mm.
    """
    if depth > params.stroke:
        raise ValueError("depth exceeds stroke")
    coeffs = coeffs or FlowModelCoeffs()
    parts = []
    for target in pressures:
        if target < 0 or target > params.supply_pressure:
            raise RegulationError(target, f"target {target} psi outside [0, {params.supply_pressure}] supply range")
        plant = BladderPlant(params, model, sensors, coeffs)

        def control(p):
            cmd, _ = route_flow(regulate_flow(target, p, gain), p, params, coeffs)
            return cmd

        t = 0.0
        while abs(plant.state.P - target) > tolerance:
            if t > settle_timeout:
                raise RegulationError(target)
            plant.step(control(plant.state.P), 0.0, dt)
            t += dt

        marks = np.arange(0.0, depth + 1e-9, spacing)
        rows = []
        z = 0.0
        next_mark = 0
        while next_mark < marks.size:
            if plant.state.z >= marks[next_mark] - 1e-9:
                f, p, zm = plant.measure()
                rows.append((marks[next_mark], p, f))
                next_mark += 1
                continue
            z = min(z + rate * dt, marks[next_mark])
            plant.step(control(plant.state.P), z, dt)
        # the robot stops exactly on each mark, so recorded z is exact
        z_col, p_col, f_col = map(np.array, zip(*rows))
        parts.append(CompressionDataset(z_col, p_col, f_col))
    return CompressionDataset.concatenate(parts, pressures, depth)
