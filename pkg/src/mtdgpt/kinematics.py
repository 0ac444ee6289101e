"""Kinematic bicycle model and the proportional lane-keeping controller."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Protocol

V_FLOOR = 0.5
DT_PHYSICS = 0.05


class MetaAction(enum.IntEnum):
    SLOW_DOWN = 0
    CRUISING = 1
    SPEED_UP = 2


_ACCEL = {MetaAction.SLOW_DOWN: -1.0, MetaAction.CRUISING: 0.0, MetaAction.SPEED_UP: 1.0}


def meta_action_to_accel(action: MetaAction | int) -> float:
    return _ACCEL[MetaAction(action)]


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    v: float
    psi: float
    route_id: int = 0
    s_route: float = 0.0

    def check_finite(self) -> None:
        for name in ("x", "y", "v", "psi", "s_route"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"VehicleState.{name} is not finite: {getattr(self, name)!r}")


@dataclass(frozen=True)
class VehicleParams:
    length: float = 5.0
    width: float = 2.0
    wheelbase_l: float = 5.0
    v_max: float = 10.0
    steer_max: float = 1.2

    def __post_init__(self):
        for name in ("length", "width", "wheelbase_l", "v_max", "steer_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"VehicleParams.{name} must be positive")
        if self.steer_max >= math.pi / 2:
            raise ValueError("steer_max must be below pi/2")


@dataclass(frozen=True)
class ControllerGains:
    kp_lat: float = 1.0 / 0.6
    kp_psi: float = 1.0 / 0.2

    def __post_init__(self):
        if self.kp_lat <= 0 or self.kp_psi <= 0:
            raise ValueError("controller gains must be positive")


class LaneRef(Protocol):
    """Anything that can report a signed lateral offset and the lane heading."""

    def project(self, x: float, y: float, s_hint: float | None = None) -> tuple[float, float]:
        """Return ``(s, lateral)`` with lateral positive to the left of travel."""

    def heading_at(self, s: float) -> float: ...


def slip_angle(steer: float) -> float:
    return math.atan(0.5 * math.tan(steer))


def bicycle_step(state: VehicleState, accel: float, steer: float, dt: float, params: VehicleParams) -> VehicleState:
    """One explicit-Euler step; all derivatives use the pre-step state."""
    state.check_finite()
    if not (math.isfinite(accel) and math.isfinite(steer)):
        raise ValueError(f"non-finite control input: accel={accel!r}, steer={steer!r}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if abs(steer) > params.steer_max + 1e-12:
        raise ValueError(f"|steer|={abs(steer):.4f} exceeds steer_max={params.steer_max}")
    beta = slip_angle(steer)
    v = state.v
    x = state.x + dt * v * math.cos(state.psi + beta)
    y = state.y + dt * v * math.sin(state.psi + beta)
    psi = wrap_angle(state.psi + dt * v / params.wheelbase_l * math.sin(beta))
    v_new = min(max(v + dt * accel, 0.0), params.v_max)
    return replace(state, x=x, y=y, v=v_new, psi=psi)


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def steering_command(
    lateral_offset: float,
    lane_heading: float,
    psi: float,
    v: float,
    gains: ControllerGains,
    params: VehicleParams,
) -> float:
    speed = max(v, V_FLOOR)
    v_lat_cmd = -gains.kp_lat * lateral_offset
    heading_offset = math.asin(_clamp(v_lat_cmd / speed, -1.0, 1.0))
    heading_ref = lane_heading + heading_offset
    yaw_rate_cmd = gains.kp_psi * wrap_angle(heading_ref - psi)
    steer = math.asin(_clamp(0.5 * params.wheelbase_l * yaw_rate_cmd / speed, -1.0, 1.0))
    return _clamp(steer, -params.steer_max, params.steer_max)


def lateral_control(
    state: VehicleState,
    lane: LaneRef,
    gains: ControllerGains,
    params: VehicleParams,
) -> float:
    """Front-wheel angle that steers ``state`` back onto ``lane``."""
    s, offset = lane.project(state.x, state.y, state.s_route)
    return steering_command(offset, lane.heading_at(s), state.psi, state.v, gains, params)
