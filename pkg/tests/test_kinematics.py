import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtdgpt.kinematics import (
    DT_PHYSICS,
    ControllerGains,
    MetaAction,
    VehicleParams,
    VehicleState,
    bicycle_step,
    lateral_control,
    meta_action_to_accel,
    slip_angle,
    steering_command,
    wrap_angle,
)
from mtdgpt.sim.geometry import Path

PARAMS = VehicleParams()
GAINS = ControllerGains()


def straight_lane(length=400.0):
    pts = np.stack([np.linspace(0, length, 801), np.zeros(801)], axis=1)
    return Path(pts, np.zeros(801))


def fit_circle(xs, ys):
    """Algebraic least-squares circle: x^2 + y^2 + D x + E y + F = 0."""
    A = np.stack([xs, ys, np.ones_like(xs)], axis=1)
    b = -(xs**2 + ys**2)
    (D, E, F), *_ = np.linalg.lstsq(A, b, rcond=None)
    cx, cy = -D / 2, -E / 2
    return math.sqrt(cx * cx + cy * cy - F)


def test_straight_line_identity():
    s = bicycle_step(VehicleState(0, 0, 10, 0), 0.0, 0.0, 0.1, PARAMS)
    assert (s.x, s.y, s.v, s.psi) == (1.0, 0.0, 10.0, 0.0)


def test_euler_uses_pre_step_speed():
    s = bicycle_step(VehicleState(0, 0, 9, 0), 1.0, 0.0, 0.1, PARAMS)
    assert s.v == pytest.approx(9.1, abs=1e-15)
    assert s.x == pytest.approx(0.9, abs=1e-15)


@pytest.mark.parametrize("delta", [0.05, 0.1, 0.2, 0.3])
def test_constant_steer_traces_circle_of_analytic_radius(delta):
    s = VehicleState(0, 0, 5, 0)
    xs, ys = np.empty(10000), np.empty(10000)
    for k in range(10000):
        s = bicycle_step(s, 0.0, delta, 0.01, PARAMS)
        xs[k], ys[k] = s.x, s.y
    expected = PARAMS.wheelbase_l / math.sin(slip_angle(delta))
    assert abs(fit_circle(xs, ys) / expected - 1) < 0.01


def test_zero_input_keeps_speed_bitwise():
    s = VehicleState(1.3, -2.0, 7.123456789, 0.4)
    for _ in range(2000):
        s = bicycle_step(s, 0.0, 0.0, DT_PHYSICS, PARAMS)
    assert s.v == 7.123456789


def test_speed_clamped_at_zero_and_vmax():
    assert bicycle_step(VehicleState(0, 0, 0.02, 0), -1.0, 0, DT_PHYSICS, PARAMS).v == 0.0
    assert bicycle_step(VehicleState(0, 0, 0.0, 0), -1.0, 0, DT_PHYSICS, PARAMS).v == 0.0
    assert bicycle_step(VehicleState(0, 0, 9.99, 0), 3.0, 0, DT_PHYSICS, PARAMS).v == PARAMS.v_max


@settings(max_examples=200, deadline=None)
@given(
    psi=st.floats(-50, 50),
    v=st.floats(0, 10),
    steer=st.floats(-1.2, 1.2),
    dt=st.floats(1e-3, 1.0),
)
def test_heading_always_wrapped(psi, v, steer, dt):
    s = bicycle_step(VehicleState(0, 0, v, wrap_angle(psi)), 0.0, steer, dt, PARAMS)
    assert -math.pi < s.psi <= math.pi


def test_wrap_angle_boundaries():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


def test_rejects_bad_inputs_naming_field():
    with pytest.raises(ValueError, match="psi"):
        bicycle_step(VehicleState(0, 0, 1, float("nan")), 0, 0, 0.1, PARAMS)
    with pytest.raises(ValueError, match="accel"):
        bicycle_step(VehicleState(0, 0, 1, 0), float("inf"), 0, 0.1, PARAMS)
    with pytest.raises(ValueError, match="dt"):
        bicycle_step(VehicleState(0, 0, 1, 0), 0, 0, 0.0, PARAMS)
    with pytest.raises(ValueError, match="steer"):
        bicycle_step(VehicleState(0, 0, 1, 0), 0, 1.3, 0.1, PARAMS)


def test_params_validation():
    with pytest.raises(ValueError):
        VehicleParams(width=-1)
    with pytest.raises(ValueError):
        VehicleParams(steer_max=2.0)
    with pytest.raises(ValueError):
        ControllerGains(kp_lat=0)


# ---------------------------------------------------------------- controller
def test_on_centerline_aligned_gives_zero_steer():
    assert lateral_control(VehicleState(10, 0, 6, 0), straight_lane(), GAINS, PARAMS) == 0.0


def test_offset_left_steers_back_and_one_step_reduces_error():
    lane = straight_lane()
    s = VehicleState(10, 1.0, 6, 0)
    steer = lateral_control(s, lane, GAINS, PARAMS)
    assert steer < 0
    for _ in range(5):
        s = bicycle_step(s, 0, lateral_control(s, lane, GAINS, PARAMS), DT_PHYSICS, PARAMS)
    assert abs(s.y) < 1.0


def test_closed_loop_settles_from_one_metre_offset():
    lane = straight_lane()
    s = VehicleState(0, 1.0, 8, 0)
    settle_time, overshoot = None, 0.0
    for k in range(int(10 / DT_PHYSICS)):
        s = bicycle_step(s, 0, lateral_control(s, lane, GAINS, PARAMS), DT_PHYSICS, PARAMS)
        overshoot = max(overshoot, -s.y)
        if abs(s.y) < 0.05 and settle_time is None:
            settle_time = (k + 1) * DT_PHYSICS
    assert settle_time is not None and settle_time < 10
    assert abs(s.y) < 0.05
    assert overshoot < 1.0


def test_controller_never_divides_by_zero_at_standstill():
    steer = lateral_control(VehicleState(10, 0.5, 0.0, 0.3), straight_lane(), GAINS, PARAMS)
    assert math.isfinite(steer) and abs(steer) <= PARAMS.steer_max


def _unclamped_steer(offset, lane_heading, psi, v, gains, params):
    v_lat = -gains.kp_lat * offset
    heading_ref = lane_heading + math.asin(v_lat / v)  # raises outside [-1, 1]
    yaw_rate = gains.kp_psi * wrap_angle(heading_ref - psi)
    return math.asin(0.5 * params.wheelbase_l * yaw_rate / v)


def test_saturation_path_at_low_speed():
    gains = ControllerGains(kp_lat=10.0, kp_psi=5.0)
    with pytest.raises(ValueError):
        _unclamped_steer(0.5, 0.0, 0.0, 2.0, gains, PARAMS)
    steer = steering_command(0.5, 0.0, 0.0, 2.0, gains, PARAMS)
    assert steer == -PARAMS.steer_max


@settings(max_examples=300, deadline=None)
@given(
    offset=st.floats(-3, 3),
    dpsi=st.floats(-1, 1),
    v=st.floats(0.5, 10),
)
def test_controller_matches_unclamped_reference_inside_domain(offset, dpsi, v):
    try:
        ref = _unclamped_steer(offset, 0.2, 0.2 + dpsi, v, GAINS, PARAMS)
    except ValueError:
        ref = None
    ours = steering_command(offset, 0.2, 0.2 + dpsi, v, GAINS, PARAMS)
    assert abs(ours) <= PARAMS.steer_max
    if ref is not None and abs(ref) <= PARAMS.steer_max:
        assert ours == pytest.approx(ref, abs=1e-12)


def test_meta_action_accelerations():
    assert meta_action_to_accel(MetaAction.SPEED_UP) == 1.0
    assert meta_action_to_accel(MetaAction.CRUISING) == 0.0
    assert meta_action_to_accel(MetaAction.SLOW_DOWN) == -1.0
