"""Closed-loop pressure bandwidth identification.

A PI pressure regulator drives the bladder (held at a fixed compression)
through a set of sinusoidal references. Each response is reduced to one
complex gain by single-bin Fourier correlation, and the dB magnitudes are
fitted with the standard second-order low-pass::

    G(s) = wn^2 / (s^2 + 2 zeta wn s + wn^2)

by Gauss-Newton from a grid of starting points. The -3 dB bandwidth of the
fit has a closed form.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .core import FitError, IntegrationError, SoftBladderError, bench_params, lpm_to_mm3s
from .force_model import ForceModel
from .plant import BladderPlant
from .pneumatics import AVERAGED, HOLD_COMMAND, FlowModelCoeffs, route_flow

DEFAULT_SWEEP_HZ = tuple(np.geomspace(0.2, 20.0, 15))
RESIDUAL_THRESHOLD_DB = 1.0


class SweepError(SoftBladderError):
    def __init__(self, frequency, message):
        super().__init__(f"sweep at {frequency:.4g} Hz: {message}")
        self.frequency = frequency


class TuningError(SoftBladderError):
    pass


# --- data types --------------------------------------------------------------


@dataclass
class BodeDataset:
    """Measured closed-loop frequency response (rad/s, dB, degrees)."""

    omega: np.ndarray
    mag_db: np.ndarray
    phase_deg: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).ravel()
        self.mag_db = np.asarray(self.mag_db, dtype=float).ravel()
        self.phase_deg = np.asarray(self.phase_deg, dtype=float).ravel()
        if not (self.omega.shape == self.mag_db.shape == self.phase_deg.shape):
            raise ValueError("omega, mag_db and phase_deg must have equal length")
        if np.any(np.diff(self.omega) <= 0):
            raise ValueError("omega must be strictly increasing")
        if not (np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.mag_db))
                and np.all(np.isfinite(self.phase_deg))):
            raise ValueError("Bode data must be finite")

    def __len__(self):
        return self.omega.size

    @classmethod
    def from_model(cls, omega_n, zeta, omega):
        """Noise-free samples of the second-order model at ``omega``."""
        g = second_order_response(omega, omega_n, zeta)
        return cls(omega, 20.0 * np.log10(np.abs(g)), np.degrees(np.angle(g)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["omega_rad_s", "mag_db", "phase_deg"])
            for row in zip(self.omega, self.mag_db, self.phase_deg):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["omega_rad_s", "mag_db", "phase_deg"]:
                raise ValueError(f"{path}: expected header omega_rad_s,mag_db,phase_deg")
            rows = [tuple(float(r[k]) for k in reader.fieldnames) for r in reader]
        omega, mag, phase = (np.array(c) for c in zip(*rows)) if rows else ([], [], [])
        return cls(omega, mag, phase)


@dataclass(frozen=True)
class SecondOrderFit:
    omega_n: float  # rad/s
    zeta: float
    rms_residual_db: float = 0.0

    def __post_init__(self):
        if not (self.omega_n > 0 and self.zeta > 0):
            raise ValueError("omega_n and zeta must be positive")

    @property
    def bandwidth_hz(self):
        return bandwidth_of(self)

    def magnitude_db(self, omega):
        return second_order_mag_db(omega, self.omega_n, self.zeta)

    def to_dict(self):
        return {
            "omega_n_rad_s": self.omega_n,
            "zeta": self.zeta,
            "bandwidth_hz": self.bandwidth_hz,
            "rms_residual_db": self.rms_residual_db,
        }


# --- second-order model ------------------------------------------------------


def second_order_response(omega, omega_n, zeta):
    s = 1j * np.asarray(omega, dtype=float)
    return omega_n**2 / (s * s + 2.0 * zeta * omega_n * s + omega_n**2)


def second_order_mag_db(omega, omega_n, zeta):
    r = np.asarray(omega, dtype=float) / omega_n
    return -10.0 * np.log10((1.0 - r * r) ** 2 + (2.0 * zeta * r) ** 2)


def bandwidth_of(fit_or_omega_n, zeta=None):
    """-3 dB frequency in Hz of the second-order model.

    Accepts a :class:`SecondOrderFit` or the pair ``(omega_n, zeta)``.
    """
    if zeta is None:
        omega_n, zeta = fit_or_omega_n.omega_n, fit_or_omega_n.zeta
    else:
        omega_n = fit_or_omega_n
    k = 1.0 - 2.0 * zeta * zeta
    return omega_n * math.sqrt(k + math.sqrt(k * k + 1.0)) / (2.0 * math.pi)


def _residuals(theta, omega, mag_db):
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        wn, zeta = np.exp(theta)
        return second_order_mag_db(omega, wn, zeta) - mag_db


def _jacobian(theta, omega, mag_db, rel_step=1e-6):
    J = np.empty((omega.size, theta.size))
    for k in range(theta.size):
        h = rel_step * max(abs(theta[k]), 1.0)
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        J[:, k] = (_residuals(tp, omega, mag_db) - _residuals(tm, omega, mag_db)) / (2.0 * h)
    return J


def gauss_newton(theta0, omega, mag_db, max_iter=100, tol=1e-12):
    """Damped Gauss-Newton on log-parameters; returns ``(theta, cost, converged)``."""
    theta = np.asarray(theta0, dtype=float)
    r = _residuals(theta, omega, mag_db)
    cost = float(r @ r)
    for _ in range(max_iter):
        J = _jacobian(theta, omega, mag_db)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        # step halving keeps every accepted iterate a descent step
        t = 1.0
        while t > 1e-6:
            trial = theta + t * step
            r_trial = _residuals(trial, omega, mag_db)
            c_trial = float(r_trial @ r_trial)
            if np.isfinite(c_trial) and c_trial <= cost:
                break
            t *= 0.5
        else:
            return theta, cost, True
        done = cost - c_trial <= tol * (1.0 + cost) and np.max(np.abs(t * step)) < 1e-10
        theta, r, cost = trial, r_trial, c_trial
        if done or cost < 1e-24:
            return theta, cost, True
    return theta, cost, False


def fit_second_order(data, n_starts=5, zeta_range=(0.2, 2.0),
                     residual_threshold=RESIDUAL_THRESHOLD_DB):
    """Least-squares fit of ``(omega_n, zeta)`` to dB magnitudes.

    Starts from an ``n_starts x n_starts`` log grid over the measured
    frequency range and ``zeta_range`` and keeps the lowest cost. Raises
    :class:`FitError` when every start fails or the rms residual exceeds
    ``residual_threshold`` dB.
    """
    omega, mag = data.omega, data.mag_db
    if omega.size < 5:
        raise FitError(f"second-order fit needs at least 5 points, got {omega.size}")
    if omega[-1] < 10.0 * omega[0]:
        raise FitError("frequency points must span at least one decade")

    best = None
    for wn0 in np.geomspace(omega[0], omega[-1], n_starts):
        for z0 in np.geomspace(*zeta_range, n_starts):
            theta, cost, ok = gauss_newton(np.log([wn0, z0]), omega, mag)
            if ok and np.all(np.isfinite(theta)) and (best is None or cost < best[1]):
                best = (theta, cost)
    if best is None:
        raise FitError("Gauss-Newton did not converge from any start")
    theta, cost = best
    rms = math.sqrt(cost / omega.size)
    if rms > residual_threshold:
        raise FitError(f"rms residual {rms:.3g} dB above threshold {residual_threshold} dB")
    return SecondOrderFit(math.exp(theta[0]), math.exp(theta[1]), rms)


class SecondOrderRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn wrapper: ``X`` is omega in rad/s, ``y`` magnitude in dB."""

    def __init__(self, n_starts=5, residual_threshold=RESIDUAL_THRESHOLD_DB):
        self.n_starts = n_starts
        self.residual_threshold = residual_threshold

    def fit(self, X, y):
        omega = np.asarray(X, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        order = np.argsort(omega)
        data = BodeDataset(omega[order], y[order], np.zeros_like(y))
        self.fit_ = fit_second_order(data, self.n_starts,
                                     residual_threshold=self.residual_threshold)
        self.omega_n_ = self.fit_.omega_n
        self.zeta_ = self.fit_.zeta
        self.bandwidth_hz_ = self.fit_.bandwidth_hz
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_.magnitude_db(np.asarray(X, dtype=float).reshape(-1))


# --- loops under test -----------------------------------------------------------


def single_bin_fourier(y, t, frequency):
    """Complex amplitude of ``y`` at ``frequency`` (Hz), mean removed.

    Assumes the samples cover an integer number of cycles at uniform spacing.
    """
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    w = np.exp(-2j * math.pi * frequency * t)
    return 2.0 * np.mean((y - y.mean()) * w)


class PassThroughLoop:
    """Identity system: output equals the reference."""

    def reset(self, initial=0.0):
        pass

    def step(self, reference, dt):
        return reference


class SecondOrderLoop:
    """Linear second-order system integrated by RK4; a sweep oracle."""

    def __init__(self, omega_n, zeta):
        self.omega_n = omega_n
        self.zeta = zeta
        self.reset()

    def reset(self, initial=0.0):
        self.x = np.array([initial, 0.0])

    def step(self, reference, dt):
        wn, z = self.omega_n, self.zeta

        def f(x):
            return np.array([x[1], wn * wn * (reference - x[0]) - 2.0 * z * wn * x[1]])

        x = self.x
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        self.x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return self.x[0]


@dataclass(frozen=True)
class PIGains:
    kp: float  # L/min per psi
    ki: float  # L/min per psi*s


class PressureLoop:
    """Bladder held at compression ``z`` under PI pressure regulation.

    The regulator output (L/min) is routed through the duty maps. A new valve
    command is computed once per PWM period and held in between, which is how
    the pulse rate limits the closed-loop bandwidth in averaged-flow mode.
    The integrator stops accumulating while the valve is saturated.
    """

    def __init__(self, gains, params=None, model=None, coeffs=None, z=0.0, mode=AVERAGED):
        self.gains = gains
        self.params = params or bench_params()
        self.model = model or ForceModel()
        self.coeffs = coeffs or FlowModelCoeffs()
        self.z = z
        self.mode = mode
        self.period = 1.0 / self.params.pwm_frequency
        self.reset()

    def reset(self, initial=0.0):
        self.plant = BladderPlant(self.params, self.model, None, self.coeffs, self.mode,
                                  initial_pressure=initial)
        self.plant.state = type(self.plant.state)(z=self.z, P=initial)
        self.integral = 0.0
        self.command = HOLD_COMMAND
        self.since_update = math.inf
        self.t = 0.0

    def step(self, reference, dt):
        if self.since_update >= self.period - 1e-9:
            self.since_update = 0.0
            P = self.plant.state.P
            e = reference - P
            Q_des = self.gains.kp * e + self.gains.ki * self.integral
            self.command, flags = route_flow(Q_des, P, self.params, self.coeffs)
            if not flags:
                self.integral += e * self.period
        phase = self.since_update / self.period
        self.plant.step(self.command, self.z, dt, phase)
        self.since_update += dt
        self.t += dt
        return self.plant.state.P


# --- experiments ---------------------------------------------------------------


def step_response(loop, target=5.0, duration=2.0, dt=1e-3):
    """Time and output arrays of ``loop`` after a 0 -> ``target`` step."""
    loop.reset(0.0)
    n = int(round(duration / dt))
    y = np.empty(n)
    for k in range(n):
        y[k] = loop.step(target, dt)
    return dt * np.arange(1, n + 1), y


def settling_time(t, y, target, band=0.02):
    """Last time the response is outside ``band * target``; inf if it ends outside."""
    outside = np.abs(y - target) > band * abs(target)
    if outside[-1]:
        return math.inf
    idx = np.nonzero(outside)[0]
    return 0.0 if idx.size == 0 else float(t[idx[-1]])


def integrator_gain(params, z, pressure):
    """Small-signal pressure rate per unit flow, psi/s per L/min, at ``(z, P)``."""
    return lpm_to_mm3s(1.0) * (pressure + params.atmospheric_pressure) / params.volume(z)


def tune_pressure_regulator(params=None, model=None, coeffs=None, z=0.0,
                            loop_gains=(0.2, 0.35, 0.5, 0.7, 1.0, 1.3),
                            integral_ratios=(0.02, 0.05, 0.1, 0.2),
                            target=5.0, duration=2.0, dt=1e-3, overshoot_weight=0.05):
    """Grid-search PI gains on a 0 -> ``target`` psi step.

    The grid is normalized to the loop: with update period ``T`` and
    integrator gain ``g`` from :func:`integrator_gain`, each candidate is
    ``kp = kappa / (g T)`` and ``ki = kp * lam / T`` for ``kappa`` in
    ``loop_gains`` and ``lam`` in ``integral_ratios``; ``kappa = 1`` is the
    deadbeat gain of the sampled integrator. Score is the 2% settling time
    plus ``overshoot_weight`` seconds per percent of overshoot; candidates
    that never settle score infinity and zero gains are skipped.

    Returns
    -------
    gains : PIGains
    score : float
    """
    params = params or bench_params()
    period = 1.0 / params.pwm_frequency
    unit = 1.0 / (integrator_gain(params, z, target) * period)
    best = None
    for kappa in loop_gains:
        for lam in integral_ratios:
            gains = PIGains(kappa * unit, kappa * unit * lam / period)
            if gains.kp <= 0:
                continue
            loop = PressureLoop(gains, params, model, coeffs, z)
            try:
                t, y = step_response(loop, target, duration, dt)
            except IntegrationError:
                continue
            ts = settling_time(t, y, target)
            overshoot = max(0.0, 100.0 * (y.max() - target) / target)
            score = ts + overshoot_weight * overshoot
            if math.isfinite(score) and (best is None or score < best[1]):
                best = (gains, score)
    if best is None:
        raise TuningError("no gain in the grid settles the pressure step")
    return best


def frequency_sweep(loop, frequencies=DEFAULT_SWEEP_HZ, amplitude=2.0, bias=5.0,
                    cycles=10, settle_cycles=3, samples_per_cycle=50, max_dt=1e-3,
                    supply=None):
    """Drive ``loop`` with ``bias + amplitude * sin(2 pi f t)`` at each frequency.

    ``loop`` exposes ``reset(initial)`` and ``step(reference, dt) -> output``.
    Settling cycles are discarded and the remaining ``cycles`` reduced by
    single-bin Fourier correlation against the reference.
    """
    freqs = np.asarray(frequencies, dtype=float)
    if freqs.size == 0 or np.any(freqs <= 0) or np.any(np.diff(freqs) <= 0):
        raise ValueError("frequencies must be positive and strictly increasing")
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    if supply is not None and not (0 < bias - amplitude and bias + amplitude < supply):
        raise ValueError("bias +/- amplitude must lie inside (0, supply)")

    mags, phases = [], []
    for f in freqs:
        dt = min(max_dt, 1.0 / (f * samples_per_cycle))
        # round so that each cycle holds an integer number of samples
        per_cycle = int(math.ceil(1.0 / (f * dt)))
        dt = 1.0 / (f * per_cycle)
        n_settle, n_keep = settle_cycles * per_cycle, cycles * per_cycle
        loop.reset(bias)
        t = dt * np.arange(n_settle + n_keep)
        ref = bias + amplitude * np.sin(2.0 * math.pi * f * t)
        out = np.empty_like(t)
        try:
            for k in range(t.size):
                out[k] = loop.step(ref[k], dt)
        except IntegrationError as exc:
            raise SweepError(f, str(exc)) from exc
        # output k is paired with reference k; the one-sample lag counts as loop delay
        y = out[n_settle:]
        g_out = single_bin_fourier(y, t[n_settle:], f)
        g_in = single_bin_fourier(ref[n_settle:], t[n_settle:], f)
        if not np.all(np.isfinite(y)) or np.ptp(y) > 10.0 * 2.0 * amplitude:
            raise SweepError(f, "output amplitude grew beyond 10x the input; loop unstable")
        g = g_out / g_in
        if abs(g) < 1e-12:
            raise SweepError(f, "no response at the drive frequency")
        mags.append(20.0 * math.log10(abs(g)))
        phases.append(math.degrees(np.angle(g)))
    return BodeDataset(2.0 * math.pi * freqs, mags, phases)


def pressure_bandwidth(params=None, model=None, coeffs=None, frequencies=DEFAULT_SWEEP_HZ,
                       amplitude=2.0, bias=5.0, z=None, gains=None):
    """Tune, sweep and fit one PWM configuration.

    The bladder is held at ``z`` (default: full stroke, the smallest volume).
    Drive frequencies at or above half the PWM frequency are dropped.
    Returns ``(SecondOrderFit, BodeDataset, PIGains)``.
    """
    params = params or bench_params()
    z = params.stroke if z is None else z
    if gains is None:
        gains, _ = tune_pressure_regulator(params, model, coeffs, z)
    # commands update at the pulse rate, so drives above its Nyquist alias
    frequencies = [f for f in frequencies if f < 0.5 * params.pwm_frequency]
    loop = PressureLoop(gains, params, model, coeffs, z)
    data = frequency_sweep(loop, frequencies, amplitude, bias, supply=params.supply_pressure)
    data.metadata.update(pwm_hz=params.pwm_frequency, supply_psi=params.supply_pressure,
                         kp=gains.kp, ki=gains.ki, z_mm=z)
    return fit_second_order(data), data, gains


def bandwidth_vs_pwm(pwm_frequencies=(10.0, 25.0, 40.0), params=None, **kwargs):
    """``{pwm_hz: (SecondOrderFit, BodeDataset, PIGains)}``, each PWM rate tuned separately."""
    params = params or bench_params()
    return {f: pressure_bandwidth(params.with_(pwm_frequency=f), **kwargs)
            for f in pwm_frequencies}
