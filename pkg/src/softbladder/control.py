"""Impedance-style force tracking with a sliding-mode flow law.

Pipeline per control sample: low-pass the measured force, look up the
desired force from the measured compression, form ``e = F - F_des``, apply a
hard dead zone, compute the desired flow::

    Q = -(rho + beta0) * tanh(e / mu)

``rho`` bounds the worst-case force drift that the flow has to cancel. The
default ``"bound"`` mode takes the larger of the upward drift
``(a_max - dF_des/dt) / b_min`` and the downward drift
``(dF_des/dt - a_min) / b_min``, floored at zero. ``"floor"`` keeps only the
first term and ``"abs"`` its magnitude. The flow is routed through the fill
or exhaust duty map. Commands change at most once per PWM period.
"""

import math
from dataclasses import dataclass, field

from .core import LPM_PER_M3S, lowpass_filter, mm3s_to_lpm
from .force_model import bounded_models, eval_partials
from .pneumatics import FlowModelCoeffs, HOLD_COMMAND, route_flow


@dataclass(frozen=True)
class SmcConfig:
    """Sliding-mode gains and signal conditioning.

    ``beta0`` is in L/min. The published gain 1e-5 is read as m^3/s, i.e.
    0.6 L/min. ``literal_z_term`` switches the first ``a_max`` term from
    ``zdot * dF/dz`` to the literal ``z * dF/dz`` for comparison runs.
    """

    beta0: float = 1e-5 * LPM_PER_M3S
    mu: float = 5.0
    deadzone: float = 1.0
    filter_cutoff: float = 40.0
    delta: float = 0.2
    literal_z_term: bool = False
    rho_mode: str = "bound"

    def __post_init__(self):
        if self.rho_mode not in ("bound", "floor", "abs"):
            raise ValueError(f"unknown rho_mode {self.rho_mode!r}")
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.deadzone < 0:
            raise ValueError("deadzone must be nonnegative")
        if self.filter_cutoff <= 0:
            raise ValueError("filter_cutoff must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class GainSchedule:
    """Ordered ``beta0`` overrides keyed by curve id and compression rate.

    Each rule is ``(curve_ids or None, min_rate, max_rate, beta0)``, rate
    bounds half-open ``[min_rate, max_rate)``. The last matching rule wins.
    """

    rules: tuple = field(default_factory=lambda: (
        (("C4",), 0.0, 20.0, 3e-5 * LPM_PER_M3S),
        (None, 20.0, math.inf, 5e-5 * LPM_PER_M3S),
    ))

    def __post_init__(self):
        for rule in self.rules:
            if rule[3] <= 0:
                raise ValueError("gain overrides must be positive")

    def beta0_for(self, curve_id, rate, default):
        beta0 = default
        for ids, lo, hi, value in self.rules:
            if (ids is None or curve_id in ids) and lo <= rate < hi:
                beta0 = value
        return beta0

    @classmethod
    def none(cls):
        return cls(rules=())


def tracking_error(F_filtered, F_des):
    return F_filtered - F_des


def apply_deadzone(e, width):
    if width < 0:
        raise ValueError("dead-zone width must be nonnegative")
    return 0.0 if abs(e) <= width else e


def sliding_gain(z, z_dot, P, F_des_rate, model, params, config):
    """Switching gain ``rho`` in L/min and whether it was computable.

    Returns ``(rho, ok)``; ``ok`` is False when ``b_min <= 0`` at the state,
    in which case ``rho`` is 0 and only ``beta0`` acts.
    """
    upper, lower = bounded_models(model, config.delta)
    p_abs = P + params.atmospheric_pressure
    v = params.volume(z)
    v_min = (1.0 - config.delta) * v
    v_max = (1.0 + config.delta) * v
    area_u = (1.0 + config.delta) * params.top_area
    dfu_dz, dfu_dp = eval_partials(upper, z, P)
    _, dfl_dp = eval_partials(lower, z, P)

    b_min = p_abs / v_max * dfl_dp  # N per mm^3 of inflow
    if not b_min > 0:
        return 0.0, False
    lead = z if config.literal_z_term else z_dot
    a_max = lead * dfu_dz + area_u * abs(z_dot) * p_abs / v_min * dfu_dp  # N/s
    rho = (a_max - F_des_rate) / b_min  # mm^3/s
    if config.rho_mode == "abs":
        return abs(mm3s_to_lpm(rho)), True
    if config.rho_mode == "bound":
        dfl_dz, _ = eval_partials(lower, z, P)
        area_l = (1.0 - config.delta) * params.top_area
        a_min = lead * dfl_dz + area_l * abs(z_dot) * p_abs / v_max * dfl_dp
        rho = max(rho, (F_des_rate - a_min) / b_min)
    return max(0.0, mm3s_to_lpm(rho)), True


def smc_flow(e, z, z_dot, P, F_des_rate, model, params, config, beta0=None):
    """Desired flow in L/min (positive fills the bladder)."""
    if e == 0.0:
        return 0.0
    rho, _ = sliding_gain(z, z_dot, P, F_des_rate, model, params, config)
    gain = rho + (config.beta0 if beta0 is None else beta0)
    return -gain * math.tanh(e / config.mu)


class ImpedanceController:
    """Stateful force-tracking loop for one plant.

    Call :meth:`step` once per simulation sample. The low-pass filter runs on
    every sample; a new valve command is issued only when a PWM period has
    elapsed since the previous one.
    """

    def __init__(self, curve, model, params, config=None, beta0=None, coeffs=None):
        self.curve = curve
        self.model = model
        self.params = params
        self.config = config or SmcConfig()
        self.beta0 = self.config.beta0 if beta0 is None else beta0
        self.coeffs = coeffs or FlowModelCoeffs()
        self.period = 1.0 / params.pwm_frequency
        self.reset()

    def reset(self):
        self.F_filt = None
        self.command = HOLD_COMMAND
        self.last_update = -math.inf
        self.diagnostics = {}

    def phase(self, t):
        """Position inside the current PWM period as a fraction in [0, 1)."""
        if math.isinf(self.last_update):
            return 0.0
        return ((t - self.last_update) / self.period) % 1.0

    def step(self, t, F_meas, P_meas, z, z_dot, dt):
        if self.F_filt is None:
            self.F_filt = F_meas
        else:
            self.F_filt = lowpass_filter(self.F_filt, F_meas, self.config.filter_cutoff, dt)
        # tolerance absorbs float drift in accumulated sample times
        if t - self.last_update < self.period - 1e-9:
            return self.command, self.diagnostics
        self.last_update = t
        self.command, self.diagnostics = control_step(
            self.F_filt, P_meas, z, z_dot, self.curve, self.model, self.params,
            self.config, self.beta0, self.coeffs,
        )
        return self.command, self.diagnostics


def control_step(F_filt, P_meas, z, z_dot, curve, model, params, config, beta0=None,
                 coeffs=None):
    """One controller evaluation on already-filtered force.

    Returns ``(ValveCommand, diagnostics)``.
    """
    beta0 = config.beta0 if beta0 is None else beta0
    flags = set()
    F_des, slope, clamped = curve.desired(z)
    if clamped:
        flags.add("curve_clamped")
    e = tracking_error(F_filt, F_des)
    e_active = apply_deadzone(e, config.deadzone)
    rho, ok = sliding_gain(z, z_dot, P_meas, slope * z_dot, model, params, config)
    if not ok:
        flags.add("b_min_fallback")
    Q_des = 0.0 if e_active == 0.0 else -(rho + beta0) * math.tanh(e_active / config.mu)
    command, route_flags = route_flow(Q_des, P_meas, params, coeffs)
    flags |= route_flags
    diagnostics = {
        "e": e,
        "F_filt": F_filt,
        "F_des": F_des,
        "rho": rho,
        "Q_des": Q_des,
        "duty": command.duty_cycle,
        "dir": command.direction,
        "flags": flags,
    }
    return command, diagnostics
