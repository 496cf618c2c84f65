import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from softbladder.core import FitError, bench_params
from softbladder.pneumatics import (
    DISCRETE,
    HOLD,
    INPUT,
    OUTPUT,
    FlowModelCoeffs,
    NoFlowError,
    PowerMap,
    PowerMapRegressor,
    SonicFlowError,
    ValveCommand,
    duty_for_input_flow,
    duty_for_output_flow,
    fit_power_map,
    full_open_lohms,
    input_flow_ratio,
    orifice_flow,
    output_flow_ratio,
    power_map_rmse,
    read_flow_map_csv,
    realized_flow,
    route_flow,
    synthetic_flow_sweep,
    write_flow_map_csv,
)

PARAMS = bench_params()
COEFFS = FlowModelCoeffs()
OUT_TRUE = (7245.0, -0.7814, 12.6)
IN_TRUE = (6000.0, -0.7, 16.0)


def test_orifice_examples():
    assert orifice_flow(14.7, 14.7, 1.0, 1.0) == 0.0
    assert orifice_flow(24.7, 14.7, 1.0, 1.0) == pytest.approx(math.sqrt(10 * 14.7))
    assert orifice_flow(24.7, 14.7, 1.0, 1.0) == pytest.approx(12.124, abs=1e-3)


def test_orifice_errors():
    with pytest.raises(SonicFlowError):
        orifice_flow(29.7, 14.7, 1.0, 1.0)
    with pytest.raises(ValueError):
        orifice_flow(10.0, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        orifice_flow(14.0, 14.7, 1.0, 1.0)


def test_orifice_sonic_clip():
    clipped = orifice_flow(40.0, 14.7, 1.0, 1.0, clip_sonic=True)
    assert clipped == pytest.approx(math.sqrt(0.9 * 14.7 * 14.7))


@given(st.floats(14.7, 27.0), st.floats(14.7, 27.0))
def test_orifice_increasing_in_upstream(a, b):
    lo, hi = sorted((a, b))
    if hi - lo < 1e-6:
        return
    assert orifice_flow(hi, 14.7, 1.0, 1.0) > orifice_flow(lo, 14.7, 1.0, 1.0)


def _q_for_ratio(x, P, direction):
    ref = (output_flow_ratio if direction == OUTPUT else input_flow_ratio)(1.0, P, PARAMS)
    return ref / x


def test_output_duty_examples():
    P = 5.0
    assert duty_for_output_flow(_q_for_ratio(1.0, P, OUTPUT), P, PARAMS) == 100.0
    assert duty_for_output_flow(1e-9, P, PARAMS) == pytest.approx(12.6, abs=1e-3)
    x = 7245.0 ** (1 / 0.7814)
    assert x == pytest.approx(87440, rel=0.01)
    assert duty_for_output_flow(_q_for_ratio(x, P, OUTPUT), P, PARAMS) == pytest.approx(13.6)


def test_input_duty_examples():
    P = 5.0
    assert duty_for_input_flow(_q_for_ratio(1.0, P, INPUT), P, PARAMS) == 100.0
    assert duty_for_input_flow(1e-9, P, PARAMS) == pytest.approx(16.0, abs=1e-3)
    x = 6000.0 ** (1 / 0.7)
    assert x == pytest.approx(2.54e5, rel=0.02)
    assert duty_for_input_flow(_q_for_ratio(x, P, INPUT), P, PARAMS) == pytest.approx(17.0)


def test_no_flow_errors():
    with pytest.raises(NoFlowError):
        duty_for_output_flow(1.0, 0.0, PARAMS)
    with pytest.raises(NoFlowError):
        duty_for_input_flow(1.0, PARAMS.supply_pressure, PARAMS)


@given(st.floats(0.1, 9.9), st.floats(1e-3, 1.0), st.floats(1e-3, 1.0))
def test_duty_monotone_in_flow(P, q1, q2):
    lo, hi = sorted((q1, q2))
    assert duty_for_output_flow(lo, P, PARAMS) <= duty_for_output_flow(hi, P, PARAMS)
    assert duty_for_input_flow(lo, P, PARAMS) <= duty_for_input_flow(hi, P, PARAMS)


@given(st.floats(0.2, 9.8), st.floats(0.02, 0.95))
def test_map_inverse_round_trip(P, frac):
    for direction, sign in ((OUTPUT, -1.0), (INPUT, 1.0)):
        full = abs(realized_flow(ValveCommand(100.0, direction), P, PARAMS))
        q = frac * full
        duty = (duty_for_output_flow if direction == OUTPUT else duty_for_input_flow)(q, P, PARAMS)
        assert duty < 100.0
        back = realized_flow(ValveCommand(duty, direction), P, PARAMS)
        assert back == pytest.approx(sign * q, rel=1e-9)


def test_zero_duty_gives_zero_flow():
    for mode in ("averaged", DISCRETE):
        assert realized_flow(ValveCommand(0.0, OUTPUT), 5.0, PARAMS, mode=mode) == 0.0
        assert realized_flow(ValveCommand(0.0, INPUT), 5.0, PARAMS, mode=mode) == 0.0


def test_below_floor_gives_zero_flow():
    assert realized_flow(ValveCommand(10.0, OUTPUT), 5.0, PARAMS) == 0.0


def test_direction_signs():
    assert realized_flow(ValveCommand(50.0, OUTPUT), 5.0, PARAMS) < 0
    assert realized_flow(ValveCommand(50.0, INPUT), 5.0, PARAMS) > 0


@pytest.mark.parametrize("direction", [INPUT, OUTPUT])
@pytest.mark.parametrize("duty", [25.0, 50.0, 80.0])
def test_discrete_mean_flow(direction, duty):
    P = 4.0
    phases = (np.arange(1000) + 0.5) / 1000
    flows = [realized_flow(ValveCommand(duty, direction), P, PARAMS, mode=DISCRETE, phase=ph)
             for ph in phases]
    full = realized_flow(ValveCommand(100.0, direction), P, PARAMS, mode=DISCRETE, phase=0.0)
    assert np.mean(flows) == pytest.approx(duty / 100.0 * full, rel=0.01)


def test_discrete_exhaust_uses_two_valves():
    lohms_in, lohms_out = full_open_lohms(COEFFS)
    q = realized_flow(ValveCommand(100.0, OUTPUT), 4.0, PARAMS, mode=DISCRETE)
    one_valve = orifice_flow(18.7, 14.7, lohms_out, PARAMS.valve_constant)
    assert q == pytest.approx(-2.0 * one_valve)


def test_valve_command_invariants():
    assert ValveCommand(150.0, INPUT).duty_cycle == 100.0
    assert ValveCommand(-5.0, OUTPUT).duty_cycle == 0.0
    assert ValveCommand(50.0, HOLD).duty_cycle == 0.0
    with pytest.raises(ValueError):
        ValveCommand(10.0, "sideways")


def test_route_flow():
    cmd, flags = route_flow(0.0, 5.0, PARAMS)
    assert cmd.direction == HOLD and not flags
    cmd, flags = route_flow(-1.0, 5.0, PARAMS)
    assert cmd.direction == OUTPUT and cmd.duty_cycle > 12.6
    cmd, flags = route_flow(1e6, 5.0, PARAMS)
    assert cmd.direction == INPUT and "saturated" in flags
    cmd, flags = route_flow(-1.0, 0.0, PARAMS)
    assert cmd.direction == HOLD and "no_flow" in flags


def test_power_map_validation():
    with pytest.raises(ValueError):
        PowerMap(-1.0, -0.5, 10.0)
    with pytest.raises(ValueError):
        PowerMap(1.0, 0.5, 10.0)
    assert math.isinf(PowerMap(*OUT_TRUE).ratio(12.6))


def _synthetic(coeffs, n=40):
    x = np.geomspace(300.0, 3e5, n)
    return x, PowerMap(*coeffs).duty(x)


@pytest.mark.parametrize("true", [OUT_TRUE, IN_TRUE])
def test_fit_power_map_recovers(true):
    x, y = _synthetic(true)
    np.testing.assert_allclose(fit_power_map(x, y), true, rtol=0.01)


def test_fit_power_map_preconditions():
    with pytest.raises(FitError):
        fit_power_map([1.0, 2.0], [20.0, 30.0])
    with pytest.raises(FitError):
        fit_power_map([5.0] * 4, [20.0, 21.0, 22.0, 23.0])
    with pytest.raises(ValueError):
        fit_power_map([-1.0, 2.0, 3.0], [20.0, 30.0, 40.0])


def test_fit_power_map_beats_truth_on_noisy_data():
    x, y = _synthetic(OUT_TRUE)
    y = y + np.random.default_rng(3).normal(0.0, 1.0, y.size)
    fitted = fit_power_map(x, y)
    assert power_map_rmse(x, y, fitted) <= power_map_rmse(x, y, OUT_TRUE) + 1e-9


def test_power_map_regressor():
    x, y = _synthetic(IN_TRUE)
    reg = clone(PowerMapRegressor(n_grid=31)).fit(x.reshape(-1, 1), y)
    assert reg.get_params()["n_grid"] == 31
    np.testing.assert_allclose(reg.coef_, IN_TRUE, rtol=0.01)
    np.testing.assert_allclose(reg.predict(x.reshape(-1, 1)), y, rtol=0.01)


@pytest.mark.parametrize("direction, true", [(OUTPUT, OUT_TRUE), (INPUT, IN_TRUE)])
def test_flow_sweep_identifies_map(direction, true):
    rows = synthetic_flow_sweep(direction, PARAMS, COEFFS)
    np.testing.assert_allclose(fit_power_map(rows[:, 3], rows[:, 1]), true, rtol=0.01)


def test_flow_map_csv_round_trip(tmp_path):
    x, y = _synthetic(OUT_TRUE, 5)
    path = tmp_path / "flow.csv"
    write_flow_map_csv(path, x, y)
    assert path.read_text().splitlines()[0] == "x_ratio,duty_pct"
    bx, by = read_flow_map_csv(path)
    np.testing.assert_array_equal(bx, x)
    np.testing.assert_array_equal(by, y)
