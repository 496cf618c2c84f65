"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import math
import time

import numpy as np
import pytest

from softbladder.control import (
    ImpedanceController,
    SmcConfig,
    control_step,
    sliding_gain,
    smc_flow,
)
from softbladder.core import bench_params
from softbladder.force_model import (
    DEFAULT_COEFFICIENTS,
    ForceModel,
    eval_force,
    eval_partials,
)
from softbladder.harness import RATES, Settings, identify_flow, identify_force, run_full_matrix
from softbladder.plant import CompressionProfile, PlantState, step_plant
from softbladder.pneumatics import (
    DISCRETE,
    INPUT,
    OUTPUT,
    ValveCommand,
    duty_for_input_flow,
    duty_for_output_flow,
    realized_flow,
)
from softbladder.sysid import BodeDataset, bandwidth_of, bandwidth_vs_pwm, fit_second_order
from softbladder.trajectories import CURVE_IDS, get_curve

PARAMS = bench_params()
MODEL = ForceModel()
OUT_TRUE = (7245.0, -0.7814, 12.6)
IN_TRUE = (6000.0, -0.7, 16.0)


def rel_err(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)) / np.abs(np.asarray(b))))


def verdict(report, number, title, checks, elapsed, budget):
    """Print one line per criterion and fail the test if any check failed.

    ``checks`` maps a short label to ``(ok, detail)``.
    """
    timing_ok = elapsed < budget
    ok = timing_ok and all(c[0] for c in checks.values())
    failed = [k for k, c in checks.items() if not c[0]]
    if not timing_ok:
        failed.append("runtime")
    detail = "; ".join(f"{k}: {d}" for k, (_, d) in checks.items())
    report(f"\ncriterion {number} ({title}): {'PASS' if ok else 'FAIL'} "
           f"[{elapsed:.2f}s / {budget:g}s] {detail}")
    assert ok, f"criterion {number} failed: {', '.join(failed)}"


def test_criterion_1_bandwidth_identity(report):
    start = time.perf_counter()
    bw = bandwidth_of(58.5, 0.86)
    checks = {
        "value": (abs(bw - 7.39) < 5e-3, f"bandwidth {bw:.4f} Hz"),
        "published": (abs(bw - 7.3) <= 0.1, f"|bw - 7.3| = {abs(bw - 7.3):.3f} Hz"),
    }
    verdict(report, 1, "bandwidth identity", checks, time.perf_counter() - start, 1.0)


def test_criterion_2_force_surface_values(report):
    start = time.perf_counter()
    c = DEFAULT_COEFFICIENTS
    z, P = np.meshgrid(np.linspace(0.0, 20.0, 41), np.linspace(0.0, 10.0, 21))
    z, P = z.ravel(), P.ravel()
    direct = c[0] * z + c[1] * z**2 + c[2] * z * P + c[3] * z**3 + c[4] * z**2 * P
    got = eval_force(MODEL, z, P)
    nz = direct != 0
    worst = rel_err(got[nz], direct[nz])
    checks = {
        "grid": (worst <= 1e-12 and np.all(got[~nz] == 0.0), f"max rel err {worst:.1e}"),
        "examples": (abs(eval_force(MODEL, 10, 0) - 67.18) < 1e-9
                     and abs(eval_force(MODEL, 20, 10) - 283.84) < 1e-9,
                     "F(10,0)=67.18, F(20,10)=283.84"),
        "origin": (eval_force(MODEL, 0.0, 0.0) == 0.0, "F(0,0)=0"),
    }
    verdict(report, 2, "force surface values", checks, time.perf_counter() - start, 1.0)


def test_criterion_3_identification_round_trips(report):
    start = time.perf_counter()
    clean = Settings(force_noise_std=0.0, pressure_noise_std=0.0)
    model, r2, _ = identify_force(clean)
    e_clean = rel_err(model.coefficients, DEFAULT_COEFFICIENTS)
    noisy_model, noisy_r2, _ = identify_force(Settings(force_noise_std=2.0), seed=1)
    e_noisy = rel_err(noisy_model.coefficients, DEFAULT_COEFFICIENTS)
    coeffs, _ = identify_flow(clean)
    e_out = rel_err(coeffs.out_map.as_tuple(), OUT_TRUE)
    e_in = rel_err(coeffs.in_map.as_tuple(), IN_TRUE)
    omega = np.geomspace(58.5 / 20, 58.5 * 10, 20)
    fit = fit_second_order(BodeDataset.from_model(58.5, 0.86, omega))
    e_bode = rel_err([fit.omega_n, fit.zeta], [58.5, 0.86])
    checks = {
        "force clean": (e_clean <= 1e-6 and r2 == pytest.approx(1.0, abs=1e-12),
                        f"rel err {e_clean:.1e}, R2 {r2:.12f}"),
        "force 2N noise": (e_noisy <= 0.05 and noisy_r2 > 0.98,
                           f"rel err {e_noisy:.2%}, R2 {noisy_r2:.5f}"),
        "power maps": (max(e_out, e_in) <= 0.01, f"out {e_out:.2%}, in {e_in:.2%}"),
        "second order": (e_bode <= 0.005, f"rel err {e_bode:.1e}"),
    }
    verdict(report, 3, "identification round trips", checks, time.perf_counter() - start, 10.0)


def test_criterion_4_physics_invariants(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)

    s = PlantState(P=2.0)
    pv0 = (s.P + PARAMS.atmospheric_pressure) * PARAMS.volume(s.z)
    profile = CompressionProfile(20.0, PARAMS.stroke, 0.0)
    dt = 1e-3
    for k in range(int(round(profile.duration / dt))):
        s = step_plant(s, 0.0, profile.position((k + 1) * dt), dt, PARAMS)
    pv = (s.P + PARAMS.atmospheric_pressure) * PARAMS.volume(s.z)
    e_pv = abs(pv / pv0 - 1.0)

    worst_rt = 0.0
    for P, frac in zip(rng.uniform(0.2, 9.8, 500), rng.uniform(0.02, 0.95, 500)):
        for direction, inverse, sign in ((OUTPUT, duty_for_output_flow, -1.0),
                                         (INPUT, duty_for_input_flow, 1.0)):
            q = frac * abs(realized_flow(ValveCommand(100.0, direction), P, PARAMS))
            back = realized_flow(ValveCommand(inverse(q, P, PARAMS), direction), P, PARAMS)
            worst_rt = max(worst_rt, abs(back - sign * q) / q)

    worst_pwm = 0.0
    phases = (np.arange(1000) + 0.5) / 1000
    for direction in (INPUT, OUTPUT):
        for duty in (20.0, 50.0, 80.0):
            full = realized_flow(ValveCommand(100.0, direction), 4.0, PARAMS, mode=DISCRETE)
            mean = np.mean([realized_flow(ValveCommand(duty, direction), 4.0, PARAMS,
                                          mode=DISCRETE, phase=ph) for ph in phases])
            worst_pwm = max(worst_pwm, abs(mean / (duty / 100.0 * full) - 1.0))

    worst_fd, h = 0.0, 1e-4
    for z, P in zip(rng.uniform(0.5, 20.0, 500), rng.uniform(0.0, 10.0, 500)):
        dz, dp = eval_partials(MODEL, z, P)
        fd_z = (eval_force(MODEL, z + h, P) - eval_force(MODEL, z - h, P)) / (2 * h)
        fd_p = (eval_force(MODEL, z, P + h) - eval_force(MODEL, z, P - h)) / (2 * h)
        worst_fd = max(worst_fd, abs(fd_z / dz - 1.0), abs(fd_p / dp - 1.0))

    checks = {
        "PV": (e_pv <= 1e-3, f"drift {e_pv:.1e}"),
        "duty round trip": (worst_rt <= 1e-9, f"max rel err {worst_rt:.1e}"),
        "PWM mean": (worst_pwm <= 0.01, f"max rel err {worst_pwm:.1e}"),
        "partials": (worst_fd <= 1e-6, f"max rel err {worst_fd:.1e}"),
    }
    verdict(report, 4, "physics invariants", checks, time.perf_counter() - start, 5.0)


def test_criterion_5_controller_invariants(report):
    start = time.perf_counter()
    config = SmcConfig()
    floor_config = SmcConfig(rho_mode="floor")
    rng = np.random.default_rng(5)
    n = 100_000
    states = np.column_stack([
        rng.uniform(-300.0, 300.0, n), rng.uniform(0.0, 20.0, n), rng.uniform(-25.0, 25.0, n),
        rng.uniform(0.0, 10.0, n), rng.uniform(-1500.0, 1500.0, n),
    ])
    states[:, 0] = np.where(np.abs(states[:, 0]) <= config.deadzone, 2.0, states[:, 0])
    sign_bad = bound_bad = 0
    for e, z, zd, P, rate in states.tolist():
        for cfg in (config, floor_config):
            q = smc_flow(e, z, zd, P, rate, MODEL, PARAMS, cfg)
            rho, _ = sliding_gain(z, zd, P, rate, MODEL, PARAMS, cfg)
            sign_bad += (q > 0) == (e > 0) or q == 0.0
            bound_bad += abs(q) > rho + cfg.beta0 + 1e-12

    curve = get_curve("C1")
    dz_bad = 0
    for z, P, offset in zip(rng.uniform(0, 20, 1000), rng.uniform(0, 10, 1000),
                            rng.uniform(-config.deadzone, config.deadzone, 1000)):
        _, diag = control_step(curve(z) + offset, P, z, 5.0, curve, MODEL, PARAMS, config)
        dz_bad += diag["Q_des"] != 0.0

    ctrl = ImpedanceController(curve, MODEL, PARAMS, config)
    dt, prev, zoh_bad, updates = 1e-3, None, 0, 0
    period_steps = round(1.0 / PARAMS.pwm_frequency / dt)
    for k in range(1000):
        cmd, _ = ctrl.step(k * dt, 150.0 + 60.0 * rng.standard_normal(), 3.0, 5.0, 2.0, dt)
        if cmd is not prev:
            updates += 1
            zoh_bad += k % period_steps != 0
        prev = cmd

    checks = {
        "sign": (sign_bad == 0, f"{sign_bad} violations in {2 * n} evaluations"),
        "magnitude": (bound_bad == 0, f"{bound_bad} above rho + beta0"),
        "dead zone": (dz_bad == 0, f"{dz_bad} nonzero Q_des of 1000"),
        "ZOH": (zoh_bad == 0 and updates > 1, f"{updates} updates, {zoh_bad} off-period"),
    }
    verdict(report, 5, "controller invariants", checks, time.perf_counter() - start, 5.0)


@pytest.fixture(scope="module")
def matrix():
    start = time.perf_counter()
    result = run_full_matrix(Settings(), CURVE_IDS, RATES, seed=0)
    return result, time.perf_counter() - start


def test_criterion_6_tracking_trends(report, matrix):
    result, elapsed = matrix
    table = result.mean_table()
    errs = {c: table[c] for c in CURVE_IDS}
    report("\n" + result.format_table())
    monotone = [c for c in CURVE_IDS if np.any(np.diff(errs[c]) < 0)]
    c3_bad = [r for i, r in enumerate(RATES) if errs["C3"][i] > errs["C1"][i]]
    c4_bad = [r for i, r in enumerate(RATES)
              if errs["C4"][i] < max(errs[c][i] for c in CURVE_IDS)]
    ceiling = eval_force(MODEL, PARAMS.stroke, PARAMS.supply_pressure)
    frac = errs["C1"][0] / ceiling
    checks = {
        "complete": (not result.failures, f"{len(result.failures)} failed cells"),
        "rate monotone": (not monotone, f"violations {monotone or 'none'}"),
        "C3<=C1": (not c3_bad, f"violations at {c3_bad or 'none'}"),
        "C4 largest": (not c4_bad, f"violations at {c4_bad or 'none'}"),
        "C1@2 mm/s": (frac <= 0.02, f"{errs['C1'][0]:.2f} N = {frac:.2%} of {ceiling:.2f} N"),
    }
    verdict(report, 6, "tracking trends", checks, elapsed, 60.0)


def test_criterion_7_workspace_floor(report, matrix):
    result, _ = matrix
    start = time.perf_counter()
    worst_err, pinned, rates_seen = 0.0, True, 0
    for rate in RATES:
        s = result.records[("C2", rate)].series
        mask = (s["in_ramp"] > 0) & (s["z_mm"] >= 1.0) & (s["z_mm"] <= 4.0) & (s["Fdes_N"] == 0)
        if not mask.any():
            continue
        rates_seen += 1
        floor = eval_force(MODEL, s["z_mm"][mask], 0.0)
        worst_err = max(worst_err, float(np.max(np.abs(s["e_N"][mask] / floor - 1.0))))
        pinned &= bool(np.all(s["Qdes_lpm"][mask] < 0.0))
    checks = {
        "coverage": (rates_seen == len(RATES), f"{rates_seen} of {len(RATES)} rates"),
        "e ~ F(z,0)": (worst_err <= 0.10, f"max rel deviation {worst_err:.1%} for z in [1, 4] mm"),
        "Q_des < 0": (pinned, "pinned negative" if pinned else "not pinned"),
    }
    verdict(report, 7, "workspace floor", checks, time.perf_counter() - start, 10.0)


def test_criterion_8_pwm_ordering(report):
    start = time.perf_counter()
    results = bandwidth_vs_pwm((10.0, 25.0, 40.0), bench_params())
    bws = [results[f][0].bandwidth_hz for f in (10.0, 25.0, 40.0)]
    detail = ", ".join(f"{f:g} Hz PWM -> {bw:.2f} Hz" for f, bw in zip((10, 25, 40), bws))
    checks = {"nondecreasing": (bool(np.all(np.diff(bws) >= 0)), detail)}
    verdict(report, 8, "PWM ordering", checks, time.perf_counter() - start, 30.0)
