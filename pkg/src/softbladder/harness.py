"""Experiment orchestration: tracking runs, the curve x rate matrix and the
identification pipeline, plus their CSV and text artifacts."""

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import GainSchedule, ImpedanceController, SmcConfig
from .core import (ConfigError, SoftBladderError, bench_params, error_stats,
                   params_from_config, read_config)
from .force_model import (DEFAULT_COEFFICIENTS, TERM_NAMES, CompressionDataset, ForceModel,
                          eval_force, fit_force_model, workspace_envelope)
from .plant import BladderPlant, CompressionProfile, SensorModel, run_quasistatic_sweep
from .pneumatics import (AVERAGED, DISCRETE, INPUT, OUTPUT, FlowModelCoeffs, PowerMap,
                         fit_power_map, synthetic_flow_sweep, write_flow_map_csv)
from .sysid import pressure_bandwidth
from .trajectories import CURVE_IDS, get_curve, workspace_membership

log = logging.getLogger(__name__)

RATES = (2.0, 4.0, 8.0, 20.0)

SERIES_COLUMNS = (
    "t_s", "z_mm", "zdot_mm_s", "P_psi", "F_N", "Q_lpm", "duty_pct", "valve_dir",
    "F_meas_N", "e_N", "F_filt_N", "Fdes_N", "rho", "Qdes_lpm", "dir", "flags",
    "in_ramp", "inside",
)
_TEXT_COLUMNS = ("valve_dir", "dir", "flags")


class ExperimentError(SoftBladderError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass
class ExperimentRecord:
    metadata: dict
    series: dict
    summary: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.series["t_s"])

    def stats_mask(self):
        return np.asarray(self.series["in_ramp"], bool) & np.asarray(self.series["inside"], bool)

    def summarize(self):
        self.summary = summarize_series(self.series)
        return self.summary

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for k, v in self.metadata.items():
                w.writerow([f"# {k}={v}"])
            w.writerow(SERIES_COLUMNS)
            cols = [self.series[c] for c in SERIES_COLUMNS]
            for row in zip(*cols):
                w.writerow([v if isinstance(v, str) else repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        metadata, rows = {}, []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = None
            for row in reader:
                if row and row[0].startswith("# "):
                    k, _, v = row[0][2:].partition("=")
                    metadata[k] = v
                elif header is None:
                    header = row
                else:
                    rows.append(row)
        series = {}
        for i, name in enumerate(header):
            col = [r[i] for r in rows]
            series[name] = col if name in _TEXT_COLUMNS else np.array(col, dtype=float)
        record = cls(metadata, series)
        record.summarize()
        return record


def summarize_series(series):
    in_ramp = np.asarray(series["in_ramp"], bool)
    inside = np.asarray(series["inside"], bool)
    mask = in_ramp & inside
    e = np.asarray(series["e_N"], float)[mask]
    mean, std = error_stats(e) if e.size else (math.nan, math.nan)
    duty = np.asarray(series["duty_pct"], float)[in_ramp]
    flags = [f for f, r in zip(series["flags"], in_ramp) if r]
    n_ramp = max(int(in_ramp.sum()), 1)
    return {
        "mean_abs_error": mean,
        "std_abs_error": std,
        "masked_fraction": 1.0 - mask.sum() / n_ramp,
        "saturation_fraction": sum("saturated" in f for f in flags) / n_ramp,
        "full_duty_fraction": float(np.mean(duty >= 100.0)) if duty.size else 0.0,
        "samples": int(mask.sum()),
    }


def run_tracking_experiment(curve_id, rate, config=None, schedule=None, params=None,
                            model=None, sensors=None, mode=AVERAGED, dt=None, seed=0,
                            dwell=0.5, plant_model=None, damping=0.0, coeffs=None):
    """Compress the bladder through its stroke while tracking a haptic curve.

    Statistics cover the compression ramp only, restricted to samples whose
    desired (z, F) lies inside the open-loop workspace.
    """
    if not rate > 0:
        raise ValueError("compression rate must be positive")
    params = params or bench_params()
    model = model or ForceModel()
    config = config or SmcConfig()
    schedule = schedule if schedule is not None else GainSchedule()
    coeffs = coeffs or FlowModelCoeffs()
    if sensors is None:
        sensors = SensorModel(seed=seed)
    else:
        sensors.reset()
    if dt is None:
        dt = 1e-3 if mode == AVERAGED else min(1e-3, 0.25 / params.pwm_frequency)
    if mode == DISCRETE and dt > 0.25 / params.pwm_frequency + 1e-12:
        raise ValueError("discrete mode needs dt <= 1/(4 pwm_frequency)")

    curve = curve_id if not isinstance(curve_id, str) else get_curve(curve_id, params.stroke)
    beta0 = schedule.beta0_for(curve.id, rate, config.beta0)
    profile = CompressionProfile(rate, params.stroke, dwell)
    plant = BladderPlant(params, plant_model or model, sensors, coeffs, mode, damping)
    ctrl = ImpedanceController(curve, model, params, config, beta0, coeffs)

    n = int(round(profile.duration / dt))
    cols = {c: [] for c in SERIES_COLUMNS}
    metadata = {
        "curve": curve.id, "rate_mm_s": rate, "beta0_lpm": beta0, "mu": config.mu,
        "deadzone": config.deadzone, "seed": sensors.seed, "dt": dt, "mode": mode,
        "pwm_hz": params.pwm_frequency,
    }
    record = ExperimentRecord(metadata, cols)
    try:
        for k in range(n):
            t = k * dt
            s = plant.state
            F_meas, P_meas, z_meas = plant.measure()
            z_dot = profile.rate if profile.in_ramp(t) and s.z < profile.depth else 0.0
            command, diag = ctrl.step(t, F_meas, P_meas, z_meas, z_dot, dt)
            phase = ctrl.phase(t)
            Q = plant.step(command, profile.position(t + dt), dt, phase)
            F_des = curve(s.z)
            row = (
                t, s.z, z_dot, s.P, plant.force(s), Q, command.duty_cycle,
                command.direction, F_meas, ctrl.F_filt - F_des, ctrl.F_filt, F_des,
                diag.get("rho", 0.0), diag.get("Q_des", 0.0), diag.get("dir", "hold"),
                "|".join(sorted(diag.get("flags", ()))), float(profile.in_ramp(t)), 0.0,
            )
            for c, v in zip(SERIES_COLUMNS, row):
                cols[c].append(v)
    except SoftBladderError as exc:
        record.metadata["aborted"] = str(exc)
        _finalize(record, curve, model, params)
        raise ExperimentError(f"simulation aborted at t={t:.3f}s: {exc}", record) from exc
    _finalize(record, curve, model, params)
    return record


def _finalize(record, curve, model, params):
    series = record.series
    for c in SERIES_COLUMNS:
        if c not in _TEXT_COLUMNS:
            series[c] = np.asarray(series[c], dtype=float)
    z = series["z_mm"]
    if z.size:
        env = workspace_envelope(model, params, z=z)
        series["inside"] = workspace_membership(curve, env, z)[:, 1]
    record.summarize()


# --- settings --------------------------------------------------------------------


@dataclass
class Settings:
    """Everything a CLI run needs, loadable from an INI file."""

    params: object = field(default_factory=bench_params)
    model: ForceModel = field(default_factory=ForceModel)
    config: SmcConfig = field(default_factory=SmcConfig)
    schedule: GainSchedule = field(default_factory=GainSchedule)
    force_noise_std: float = 0.5
    pressure_noise_std: float = 0.05
    dt: float = None
    dwell: float = 0.5
    mode: str = AVERAGED

    def sensors(self, seed=0):
        return SensorModel(self.force_noise_std, self.pressure_noise_std, seed)


_SMC_KEYS = {"beta0": float, "mu": float, "deadzone": float, "filter_cutoff": float,
             "delta": float, "rho_mode": str}


def load_settings(path=None):
    """Build :class:`Settings` from an INI file; ``None`` gives the defaults.

    Sections: ``[actuator]`` (see :func:`params_from_config`), ``[force_model]``
    (c_z ... c_z2P), ``[controller]`` (beta0 in L/min, mu, deadzone,
    filter_cutoff, delta, rho_mode), ``[schedule]`` (enabled), ``[sensors]``
    and ``[simulation]`` (dt, dwell, mode).
    """
    if path is None:
        return Settings()
    parser = read_config(path)
    settings = Settings(params=params_from_config(parser))
    if parser.has_section("force_model"):
        sec = parser["force_model"]
        settings.model = ForceModel.from_array(
            [sec.getfloat(k, fallback=v) for k, v in zip(TERM_NAMES, DEFAULT_COEFFICIENTS)])
    if parser.has_section("controller"):
        kwargs = {}
        for key, value in parser.items("controller"):
            if key not in _SMC_KEYS:
                raise ConfigError(f"unknown controller key {key!r}")
            kwargs[key] = _SMC_KEYS[key](value)
        settings.config = SmcConfig(**kwargs)
    if not parser.getboolean("schedule", "enabled", fallback=True):
        settings.schedule = GainSchedule.none()
    if parser.has_section("sensors"):
        sec = parser["sensors"]
        settings.force_noise_std = sec.getfloat("force_noise_std", settings.force_noise_std)
        settings.pressure_noise_std = sec.getfloat("pressure_noise_std",
                                                   settings.pressure_noise_std)
    if parser.has_section("simulation"):
        sec = parser["simulation"]
        settings.dt = sec.getfloat("dt", fallback=None)
        settings.dwell = sec.getfloat("dwell", settings.dwell)
        settings.mode = sec.get("mode", settings.mode)
        if settings.mode not in (AVERAGED, DISCRETE):
            raise ConfigError(f"unknown flow mode {settings.mode!r}")
    return settings


def simulate(settings, curve_id, rate, seed=0, mode=None):
    """:func:`run_tracking_experiment` with everything taken from ``settings``."""
    return run_tracking_experiment(
        curve_id, rate, settings.config, settings.schedule, settings.params, settings.model,
        settings.sensors(seed), mode or settings.mode, settings.dt, seed, settings.dwell)


# --- curve x rate matrix -----------------------------------------------------------


@dataclass
class MatrixResult:
    records: dict  # (curve, rate) -> ExperimentRecord
    failures: dict  # (curve, rate) -> message

    def cell(self, curve, rate):
        return self.records[(curve, rate)].summary

    def mean_table(self):
        """``{curve: [mean |e| per rate]}`` with NaN for failed cells."""
        curves = sorted({c for c, _ in self.records} | {c for c, _ in self.failures})
        rates = sorted({r for _, r in self.records} | {r for _, r in self.failures})
        return {c: [self.records[(c, r)].summary["mean_abs_error"]
                    if (c, r) in self.records else math.nan for r in rates] for c in curves}

    @property
    def rates(self):
        return sorted({r for _, r in self.records} | {r for _, r in self.failures})

    @property
    def curves(self):
        return sorted({c for c, _ in self.records} | {c for c, _ in self.failures})

    def format_table(self):
        """Tracking error table: one row per rate, ``mean (std)`` in N per curve."""
        width = 14
        lines = ["Tracking error |e| in N, mean (std), workspace-masked compression phase",
                 "v [mm/s]".ljust(10) + "".join(c.rjust(width) for c in self.curves)]
        for r in self.rates:
            cells = []
            for c in self.curves:
                if (c, r) in self.records:
                    s = self.records[(c, r)].summary
                    cells.append(f"{s['mean_abs_error']:.2f} ({s['std_abs_error']:.2f})")
                else:
                    cells.append("failed")
            lines.append(f"{r:<10g}" + "".join(x.rjust(width) for x in cells))
        for (c, r), msg in sorted(self.failures.items()):
            lines.append(f"! {c} at {r:g} mm/s: {msg}")
        return "\n".join(lines)

    def to_csv(self, path):
        keys = ("mean_abs_error", "std_abs_error", "masked_fraction", "saturation_fraction",
                "full_duty_fraction", "samples")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("curve", "rate_mm_s") + keys + ("status",))
            for c in self.curves:
                for r in self.rates:
                    if (c, r) in self.records:
                        s = self.records[(c, r)].summary
                        w.writerow([c, repr(r)] + [repr(float(s[k])) for k in keys] + ["ok"])
                    else:
                        w.writerow([c, repr(r)] + [""] * len(keys) + [self.failures[(c, r)]])


def read_matrix_csv(path):
    """Rows of a matrix CSV as dicts with numeric fields converted."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k, v in row.items():
            if k not in ("curve", "status"):
                row[k] = float(v) if v else math.nan
    return rows


def run_full_matrix(settings=None, curves=CURVE_IDS, rates=RATES, seed=0, out_dir=None):
    """Tracking experiments over every curve and rate.

    A failing cell is recorded in ``failures`` and the matrix continues. With
    ``out_dir`` every record is written as ``run_<curve>_<rate>.csv`` next to
    ``matrix.csv`` and ``matrix.txt``.
    """
    settings = settings or Settings()
    records, failures = {}, {}
    for c in curves:
        for r in rates:
            start = time.perf_counter()
            try:
                records[(c, r)] = simulate(settings, c, r, seed)
            except (ExperimentError, ValueError) as exc:
                log.warning("cell %s @ %g mm/s failed: %s", c, r, exc)
                failures[(c, r)] = str(exc)
                continue
            log.info("cell %s @ %g mm/s done in %.2fs", c, r, time.perf_counter() - start)
    result = MatrixResult(records, failures)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for (c, r), rec in records.items():
            rec.to_csv(out_dir / f"run_{c}_{r:g}.csv")
        result.to_csv(out_dir / "matrix.csv")
        (out_dir / "matrix.txt").write_text(result.format_table() + "\n")
    return result


# --- identification pipeline -------------------------------------------------------


class PipelineError(SoftBladderError):
    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class IdentificationResult:
    model: ForceModel
    r2: float
    coeffs: FlowModelCoeffs
    fit: object  # SecondOrderFit
    dataset: CompressionDataset = None
    flow_data: dict = None
    bode: object = None
    gains: object = None

    def summary(self):
        out = {"force_r2": self.r2}
        out.update({f"force_{k}": v for k, v in self.model.to_dict().items()})
        for name, pm in (("out_map", self.coeffs.out_map), ("in_map", self.coeffs.in_map)):
            out.update(dict(zip((f"{name}_a", f"{name}_b", f"{name}_c"), pm.as_tuple())))
        if self.fit is not None:
            out.update(self.fit.to_dict())
        return out


def identify_force(settings, pressures=None, seed=0):
    params = settings.params
    if pressures is None:
        pressures = np.arange(0.0, params.supply_pressure + 1e-9, 1.0)
    data = run_quasistatic_sweep(params, settings.model, pressures, params.stroke,
                                 sensors=settings.sensors(seed))
    model, r2 = fit_force_model(data)
    return model, r2, data


def identify_flow(settings, coeffs=None, flow_noise_std=0.0, seed=0):
    coeffs = coeffs or FlowModelCoeffs()
    maps, data = {}, {}
    for direction in (OUTPUT, INPUT):
        rows = synthetic_flow_sweep(direction, settings.params, coeffs,
                                    flow_noise_std=flow_noise_std, seed=seed)
        maps[direction] = PowerMap(*fit_power_map(rows[:, 3], rows[:, 1]))
        data[direction] = rows
    return FlowModelCoeffs(maps[OUTPUT], maps[INPUT]), data


def identify_bandwidth(settings, coeffs=None, **kwargs):
    return pressure_bandwidth(settings.params, settings.model, coeffs, **kwargs)


def run_identification_pipeline(settings=None, seed=0, out_dir=None, stages=None):
    """Force surface, valve maps and closed-loop bandwidth, in that order.

    Any failure is re-raised as :class:`PipelineError` naming the stage.
    ``stages`` restricts the run to a subset of ``("force", "flow", "bandwidth")``.
    """
    settings = settings or Settings()
    stages = stages or ("force", "flow", "bandwidth")
    result = IdentificationResult(settings.model, math.nan, FlowModelCoeffs(), None)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    try:
        stage = "force"
        if stage in stages:
            result.model, result.r2, result.dataset = identify_force(settings, seed=seed)
            if out_dir is not None:
                result.dataset.to_csv(out_dir / "force_dataset.csv")
        stage = "flow"
        if stage in stages:
            result.coeffs, result.flow_data = identify_flow(settings, seed=seed)
            if out_dir is not None:
                for direction, rows in result.flow_data.items():
                    write_flow_map_csv(out_dir / f"flow_{direction}.csv", rows[:, 3], rows[:, 1])
        stage = "bandwidth"
        if stage in stages:
            result.fit, result.bode, result.gains = identify_bandwidth(
                settings, result.coeffs, gains=None)
            if out_dir is not None:
                result.bode.to_csv(out_dir / "bode.csv")
    except (SoftBladderError, ValueError) as exc:
        raise PipelineError(stage, str(exc)) from exc
    if out_dir is not None:
        (out_dir / "identification.txt").write_text(
            format_summary("identification", result.summary()))
    return result


def format_summary(title, values):
    """``[title]`` followed by aligned ``key = value`` lines."""
    width = max((len(k) for k in values), default=0)
    lines = [f"[{title}]"]
    for k, v in values.items():
        text = f"{v:.6g}" if isinstance(v, float) else str(v)
        lines.append(f"{k.ljust(width)} = {text}")
    return "\n".join(lines) + "\n"


# --- plot data --------------------------------------------------------------------


def _write_series(path, header, *columns):
    np.savetxt(path, np.column_stack(columns), delimiter=",", header=",".join(header),
               comments="")


def write_surface_data(out_dir, model, params, n=21):
    """Force-surface samples, one ``z,F`` file per pressure."""
    z = np.linspace(0.0, params.stroke, n)
    paths = []
    for P in np.arange(0.0, params.supply_pressure + 1e-9, 1.0):
        path = Path(out_dir) / f"surface_P{P:g}.csv"
        _write_series(path, ("z_mm", "F_N"), z, eval_force(model, z, P))
        paths.append(path)
    return paths


def write_bode_data(out_dir, data, fit=None, tag=""):
    out_dir = Path(out_dir)
    paths = [out_dir / f"bode_measured{tag}.csv"]
    _write_series(paths[0], ("omega_rad_s", "mag_db"), data.omega, data.mag_db)
    if fit is not None:
        w = np.geomspace(data.omega[0], data.omega[-1], 200)
        paths.append(out_dir / f"bode_fit{tag}.csv")
        _write_series(paths[1], ("omega_rad_s", "mag_db"), w, fit.magnitude_db(w))
    return paths


def write_workspace_data(out_dir, model, params, curves=CURVE_IDS, n=81):
    """Curves plus the workspace floor and ceiling as ``z,F`` files."""
    out_dir = Path(out_dir)
    env = workspace_envelope(model, params, n)
    _write_series(out_dir / "workspace_floor.csv", ("z_mm", "F_N"), env[:, 0], env[:, 1])
    _write_series(out_dir / "workspace_ceiling.csv", ("z_mm", "F_N"), env[:, 0], env[:, 2])
    rows = {}
    for cid in curves:
        curve = get_curve(cid, params.stroke)
        member = workspace_membership(curve, env)
        _write_series(out_dir / f"workspace_{cid}.csv", ("z_mm", "F_N"), env[:, 0], curve(env[:, 0]))
        rows[cid] = float(member[:, 1].mean())
    return env, rows


def write_record_plots(out_dir, record):
    """Desired vs measured force over z, and flow / force over time."""
    out_dir = Path(out_dir)
    s = record.series
    tag = f"{record.metadata['curve']}_{float(record.metadata['rate_mm_s']):g}"
    _write_series(out_dir / f"{tag}_path_desired.csv", ("z_mm", "F_N"), s["z_mm"], s["Fdes_N"])
    _write_series(out_dir / f"{tag}_path_measured.csv", ("z_mm", "F_N"), s["z_mm"], s["F_filt_N"])
    _write_series(out_dir / f"{tag}_flow.csv", ("t_s", "Q_lpm"), s["t_s"], s["Q_lpm"])
    _write_series(out_dir / f"{tag}_qdes.csv", ("t_s", "Qdes_lpm"), s["t_s"], s["Qdes_lpm"])
    _write_series(out_dir / f"{tag}_time_force.csv", ("t_s", "F_N"), s["t_s"], s["F_filt_N"])
    _write_series(out_dir / f"{tag}_time_desired.csv", ("t_s", "F_N"), s["t_s"], s["Fdes_N"])
