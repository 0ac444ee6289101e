"""Human-driven vehicle behaviour: IDM car following, spawning and yielding."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..kinematics import VehicleParams, VehicleState
from .geometry import Arm, IntersectionScenario, Route, TaskId


@dataclass(frozen=True)
class IDMParams:
    v0: float = 8.0
    T: float = 1.5
    s0: float = 2.0
    a_max: float = 3.0
    b: float = 2.0
    delta_exp: float = 4.0

    @property
    def b_hard(self) -> float:
        return 2.0 * self.b


@dataclass(frozen=True)
class HVProfile:
    idm: IDMParams = field(default_factory=IDMParams)
    style_scale: float = 1.0

    def __post_init__(self):
        values = [self.style_scale, *vars(self.idm).values()]
        if any(v <= 0 for v in values):
            raise ValueError("HVProfile parameters must all be positive")


def idm_accel(v: float, gap: float, closing_speed: float, p: HVProfile | IDMParams) -> float:
    """Intelligent Driver Model acceleration.

    ``gap`` is the bumper-to-bumper distance to the leader (``math.inf`` when
    there is none); ``closing_speed`` is own speed minus leader speed.
    """
    idm = p.idm if isinstance(p, HVProfile) else p
    if gap <= 0:
        return -idm.b_hard
    free = (max(v, 0.0) / idm.v0) ** idm.delta_exp
    interaction = 0.0
    if math.isfinite(gap):
        s_star = idm.s0 + v * idm.T + v * closing_speed / (2.0 * math.sqrt(idm.a_max * idm.b))
        s_star = max(s_star, 0.0)
        interaction = (s_star / gap) ** 2
    a = idm.a_max * (1.0 - free - interaction)
    return min(max(a, -idm.b_hard), idm.a_max)


# --------------------------------------------------------------------------- vehicles
@dataclass
class Vehicle:
    vid: int
    state: VehicleState
    route: Route
    profile: HVProfile | None = None
    is_ego: bool = False

    @property
    def maneuver(self) -> TaskId:
        return self.route.maneuver

    @property
    def origin(self) -> Arm:
        return self.route.origin


@dataclass(frozen=True)
class TrafficConfig:
    n_min: int = 2
    n_max: int = 4
    min_gap: float = 10.0
    speed_min: float = 4.0
    speed_max: float = 8.0
    style_min: float = 0.8
    style_max: float = 1.2
    spawn_margin: float = 10.0
    idm: IDMParams = field(default_factory=IDMParams)

    def __post_init__(self):
        if not 0 <= self.n_min <= self.n_max:
            raise ValueError(f"need 0 <= n_min <= n_max, got [{self.n_min}, {self.n_max}]")


@dataclass
class SpawnResult:
    vehicles: list[tuple[VehicleState, HVProfile, Route]]
    requested: int

    @property
    def shortfall(self) -> int:
        return self.requested - len(self.vehicles)


def jitter_profile(base: IDMParams, style: float) -> HVProfile:
    idm = replace(base, v0=base.v0 * style, T=base.T / style)
    return HVProfile(idm=idm, style_scale=style)


def spawn_traffic(
    scenario: IntersectionScenario,
    rng_seed: int | np.random.Generator,
    config: TrafficConfig,
    ego_arm: Arm | None = Arm.SOUTH,
    occupied: list[tuple[float, float]] = (),
    params: VehicleParams = VehicleParams(),
) -> SpawnResult:
    """Place a random number of HVs on approach lanes not used by the ego.

    Vehicles start before the conflict zone with bumper gaps of at least
    ``config.min_gap`` to each other and to every point in ``occupied``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = int(rng.integers(config.n_min, config.n_max + 1))
    candidates = [r for r in scenario.routes if r.origin != ego_arm]
    placed: list[tuple[VehicleState, HVProfile, Route]] = []
    taken = [tuple(p) for p in occupied]
    s_hi = scenario.config.arm_length - config.spawn_margin
    for _ in range(n):
        for _attempt in range(50):
            route = candidates[int(rng.integers(len(candidates)))]
            s = float(rng.uniform(0.0, s_hi))
            x, y = route.path.position_at(s)
            x, y = float(x), float(y)
            if all(math.hypot(x - ox, y - oy) - params.length >= config.min_gap for ox, oy in taken):
                break
        else:
            continue
        v = float(rng.uniform(config.speed_min, config.speed_max))
        style = float(rng.uniform(config.style_min, config.style_max))
        state = VehicleState(x, y, v, route.path.heading_at(s), route.rid, s)
        placed.append((state, jitter_profile(config.idm, style), route))
        taken.append((x, y))
    return SpawnResult(placed, n)


# --------------------------------------------------------------------------- geometry helpers
def rectangles_overlap(xa, ya, pa, xb, yb, pb, half_len: float, half_wid: float):
    """Separating-axis test for equal-size oriented rectangles (broadcasts)."""
    dx = np.asarray(xb) - xa
    dy = np.asarray(yb) - ya
    separated = np.zeros(np.broadcast(dx, pa, pb).shape, dtype=bool)
    for theta in (pa, pb):
        c, s = np.cos(theta), np.sin(theta)
        for ux, uy in ((c, s), (-s, c)):
            dist = np.abs(dx * ux + dy * uy)
            ra = half_len * np.abs(np.cos(pa) * ux + np.sin(pa) * uy) + half_wid * np.abs(-np.sin(pa) * ux + np.cos(pa) * uy)
            rb = half_len * np.abs(np.cos(pb) * ux + np.sin(pb) * uy) + half_wid * np.abs(-np.sin(pb) * ux + np.cos(pb) * uy)
            separated |= dist > ra + rb
    return ~separated


def vehicles_collide(a: VehicleState, b: VehicleState, params: VehicleParams) -> bool:
    if math.hypot(a.x - b.x, a.y - b.y) > math.hypot(params.length, params.width):
        return False
    return bool(rectangles_overlap(a.x, a.y, a.psi, b.x, b.y, b.psi, params.length / 2, params.width / 2))


def find_leader(i: int, vehicles: list[Vehicle], params: VehicleParams, lane_width: float, lookahead: float = 50.0):
    """Nearest vehicle ahead on ``vehicles[i]``'s path: ``(gap, closing_speed)``."""
    me = vehicles[i].state
    path = vehicles[i].route.path
    best_gap, best_closing = math.inf, 0.0
    for j, other in enumerate(vehicles):
        if j == i:
            continue
        o = other.state
        dist = math.hypot(o.x - me.x, o.y - me.y)
        if dist > lookahead:
            continue
        cos_rel = math.cos(o.psi - me.psi)
        if cos_rel < 0.5:
            continue
        s_o, lat = path.project(o.x, o.y, me.s_route, window=(8.0, dist + 8.0))
        if abs(lat) > lane_width / 2:
            continue
        ahead = s_o - me.s_route
        if ahead <= 0:
            continue
        gap = ahead - params.length
        if gap < best_gap:
            best_gap, best_closing = gap, me.v - o.v * cos_rel
    return best_gap, best_closing


# --------------------------------------------------------------------------- yielding
class YieldDecision(enum.Enum):
    PROCEED = "proceed"
    YIELD = "yield"


_MANEUVER_RANK = {TaskId.GO_STRAIGHT: 2, TaskId.TURN_RIGHT: 1, TaskId.TURN_LEFT: 0}
_ARM_RANK = {Arm.NORTH: 3, Arm.EAST: 2, Arm.SOUTH: 1, Arm.WEST: 0}


@dataclass
class Prediction:
    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    in_zone: np.ndarray


def predict_constant_speed(vehicles: list[Vehicle], scenario: IntersectionScenario, horizon: float, dt: float) -> Prediction:
    """Propagate each vehicle along its route at its current speed."""
    times = np.arange(0.0, horizon + 1e-9, dt)
    n = len(vehicles)
    xs = np.empty((n, len(times)))
    ys = np.empty_like(xs)
    ps = np.empty_like(xs)
    for k, veh in enumerate(vehicles):
        s = veh.state.s_route + veh.state.v * times
        xs[k], ys[k] = veh.route.path.position_at(s)
        ps[k] = veh.route.path.headings_at(s)
    return Prediction(times, xs, ys, ps, scenario.in_conflict_zone(xs, ys))


def committed(veh: Vehicle, params: VehicleParams) -> bool:
    return veh.state.s_route + params.length / 2 >= veh.route.s_zone_entry


def entry_time(veh: Vehicle, params: VehicleParams) -> float:
    dist = veh.route.s_zone_entry - veh.state.s_route - params.length / 2
    if dist <= 0:
        return 0.0
    return dist / veh.state.v if veh.state.v > 1e-9 else math.inf


def has_priority(a: Vehicle, b: Vehicle, params: VehicleParams) -> bool:
    """Total order used to settle a predicted conflict between ``a`` and ``b``."""
    ca, cb = committed(a, params), committed(b, params)
    if ca != cb:
        return ca
    ra, rb = _MANEUVER_RANK[a.maneuver], _MANEUVER_RANK[b.maneuver]
    if ra != rb:
        return ra > rb
    ta, tb = entry_time(a, params), entry_time(b, params)
    if ta != tb:
        return ta < tb
    if a.origin != b.origin:
        return _ARM_RANK[a.origin] > _ARM_RANK[b.origin]
    return a.state.s_route > b.state.s_route


def clear_time(veh: Vehicle, params: VehicleParams, a_max: float = 3.0) -> float:
    """Time for ``veh`` to get its rear out of the conflict zone, accelerating from its current speed."""
    dist = veh.route.s_zone_exit + params.length / 2 - veh.state.s_route
    if dist <= 0:
        return 0.0
    v = veh.state.v
    return (-v + math.sqrt(v * v + 2.0 * a_max * dist)) / a_max


def is_lane_front(j: int, vehicles: list[Vehicle], params: VehicleParams) -> bool:
    """True when no uncommitted vehicle from the same arm is closer to the zone."""
    me = vehicles[j]
    for k, other in enumerate(vehicles):
        if k != j and other.origin == me.origin and not committed(other, params):
            if other.state.s_route > me.state.s_route:
                return False
    return True


def hv_yield_decision(
    i: int,
    vehicles: list[Vehicle],
    scenario: IntersectionScenario,
    horizon: float = 5.0,
    params: VehicleParams = VehicleParams(),
    dt: float = 0.25,
    prediction: Prediction | None = None,
    margin: tuple[float, float] = (1.5, 0.5),
) -> YieldDecision:
    """Decide whether ``vehicles[i]`` must wait at the conflict-zone entry.

    It yields to a vehicle ``j`` that has priority (see :func:`has_priority`)
    when either

    * the constant-speed forecast over ``horizon`` shows their inflated
      footprints overlapping inside the conflict zone, or
    * their routes cross inside the zone and ``j`` is already in it, or is the
      front vehicle of its approach and reaches the zone before ``i`` could
      clear it.

    A vehicle whose front has passed the zone entry never yields.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    me = vehicles[i]
    if committed(me, params):
        return YieldDecision.PROCEED
    if prediction is None:
        prediction = predict_constant_speed(vehicles, scenario, horizon, dt)
    half_len = params.length / 2 + margin[0]
    half_wid = params.width / 2 + margin[1]
    my_clear = entry_time(me, params) + clear_time(me, params)
    for j, other in enumerate(vehicles):
        if j == i or other.state.s_route >= other.route.s_zone_exit:
            continue
        if other.origin == me.origin and not committed(other, params):
            continue  # same approach lane: car following handles it
        if not has_priority(other, me, params):
            continue
        if scenario.route_conflicts[me.route.rid, other.route.rid]:
            if committed(other, params):
                return YieldDecision.YIELD
            if is_lane_front(j, vehicles, params):
                dist = other.route.s_zone_entry - other.state.s_route - params.length / 2
                arrival = dist / max(other.state.v, 0.5)
                if arrival <= min(horizon, my_clear):
                    return YieldDecision.YIELD
        zone = prediction.in_zone[i] | prediction.in_zone[j]
        if not zone.any():
            continue
        hit = rectangles_overlap(
            prediction.x[i], prediction.y[i], prediction.psi[i],
            prediction.x[j], prediction.y[j], prediction.psi[j],
            half_len, half_wid,
        )
        if np.any(hit & zone):
            return YieldDecision.YIELD
    return YieldDecision.PROCEED
