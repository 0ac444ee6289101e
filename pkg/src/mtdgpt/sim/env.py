"""The intersection POMDP: observation, reward, termination and stepping."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ..kinematics import (
    ControllerGains,
    MetaAction,
    VehicleParams,
    VehicleState,
    bicycle_step,
    lateral_control,
    meta_action_to_accel,
)
from .geometry import Arm, IntersectionScenario, ScenarioConfig, TaskId, build_scenario
from .traffic import (
    TrafficConfig,
    Vehicle,
    YieldDecision,
    find_leader,
    hv_yield_decision,
    idm_accel,
    predict_constant_speed,
    spawn_traffic,
    vehicles_collide,
)

POSITION_SCALE = 100.0
SPEED_SCALE = 10.0
N_FEATURES = 4
# Rewards live on a dyadic grid so that every partial sum of an episode is
# exact in float64; return-to-go suffix sums then telescope without rounding.
REWARD_QUANTUM = 2.0**-20


class Cause(str, enum.Enum):
    RUNNING = "running"
    ARRIVED = "arrived"
    COLLIDED = "collided"
    TIMED_OUT = "timed_out"


@dataclass(frozen=True)
class RewardWeights:
    w_c: float = 1.0
    w_e: float = 1.0
    w_a: float = 1.0


@dataclass(frozen=True)
class EnvConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    gains: ControllerGains = field(default_factory=ControllerGains)
    reward: RewardWeights = field(default_factory=RewardWeights)
    horizon: int = 40
    decision_dt: float = 1.0
    physics_dt: float = 0.05
    perception_range: float = 50.0
    n_obs: int = 8
    yield_horizon: float = 5.0
    yield_period: int = 5
    ego_arm: Arm = Arm.SOUTH
    ego_speed_min: float = 4.0
    ego_speed_max: float = 8.0

    @property
    def substeps(self) -> int:
        return int(round(self.decision_dt / self.physics_dt))

    @property
    def obs_dim(self) -> int:
        return self.n_obs * N_FEATURES


@dataclass
class ObservationMatrix:
    rows: np.ndarray  # (n_obs, 4)
    presence: np.ndarray  # (n_obs,) bool

    def flat(self) -> np.ndarray:
        return self.rows.reshape(-1)


@dataclass
class StepOutcome:
    obs: ObservationMatrix
    reward: float
    terminated: bool
    cause: Cause
    info: dict = field(default_factory=dict)


def vehicle_features(state: VehicleState) -> np.ndarray:
    return np.array(
        [
            state.x / POSITION_SCALE,
            state.y / POSITION_SCALE,
            state.v * math.cos(state.psi) / SPEED_SCALE,
            state.v * math.sin(state.psi) / SPEED_SCALE,
        ]
    )


def observe(vehicles: list[Vehicle], ego_id: int, perception_range: float = 50.0, n_obs: int = 8) -> ObservationMatrix:
    """Ego row first, then the nearest vehicles within ``perception_range``."""
    by_id = {v.vid: v for v in vehicles}
    if ego_id not in by_id:
        raise KeyError(f"ego vehicle {ego_id} not present")
    ego = by_id[ego_id].state
    rows = np.zeros((n_obs, N_FEATURES))
    presence = np.zeros(n_obs, dtype=bool)
    rows[0] = vehicle_features(ego)
    presence[0] = True
    others = []
    for v in vehicles:
        if v.vid == ego_id:
            continue
        d = math.hypot(v.state.x - ego.x, v.state.y - ego.y)
        if d <= perception_range:
            others.append((d, v.vid, v.state))
    others.sort(key=lambda t: (t[0], t[1]))
    for k, (_, _, st) in enumerate(others[: n_obs - 1], start=1):
        rows[k] = vehicle_features(st)
        presence[k] = True
    np.clip(rows, -1.0, 1.0, out=rows)
    return ObservationMatrix(rows, presence)


def compute_reward(
    prev_state: VehicleState,
    new_state: VehicleState,
    collided: bool,
    arrived: bool,
    weights: RewardWeights = RewardWeights(),
    v_max: float = 10.0,
    dt_decision: float = 1.0,
    episode_norm: float = 40.0,
) -> float:
    """Weighted collision, efficiency and arrival terms for one decision step.

    ``episode_norm`` is the horizon length in seconds, so the efficiency terms
    of any episode sum to at most 1.  The result is rounded to a multiple of
    :data:`REWARD_QUANTUM`.
    """
    if collided and arrived:
        raise ValueError("a step cannot both collide and arrive")
    r_c = -1.0 if collided else 0.0
    r_e = min(max(new_state.v / v_max, 0.0), 1.0) * dt_decision / episode_norm
    r_a = 1.0 if arrived else 0.0
    r = weights.w_c * r_c + weights.w_e * r_e + weights.w_a * r_a
    return round(r / REWARD_QUANTUM) * REWARD_QUANTUM


class IntersectionEnv:
    """One ego vehicle on a task route among IDM-driven HVs.

    Each :meth:`step` covers one decision period of ``config.substeps``
    physics steps.  With ``task=None`` the environment runs HVs only.
    """

    def __init__(self, config: EnvConfig = EnvConfig(), task: TaskId | None = TaskId.TURN_LEFT):
        self.config = config
        self.scenario: IntersectionScenario = build_scenario(config.scenario)
        if config.scenario.lane_width <= config.vehicle.width:
            raise ValueError("lane width must exceed vehicle width")
        self.task = None if task is None else TaskId(task)
        self.vehicles: list[Vehicle] = []
        self.ego_id = 0
        self.steps = 0
        self.time = 0.0
        self.terminated = True
        self.cause = Cause.RUNNING
        self.hv_collisions = 0
        self.emergency_events = 0
        self.spawn_shortfall = 0
        self.trace: list[dict] | None = None
        self._yield: dict[int, YieldDecision] = {}
        self._substep_count = 0

    # ------------------------------------------------------------------ setup
    def reset(self, seed: int, record_trace: bool = False) -> ObservationMatrix | None:
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.vehicles = []
        occupied = []
        if self.task is not None:
            route = self.scenario.route(cfg.ego_arm, self.task)
            v0 = float(rng.uniform(cfg.ego_speed_min, cfg.ego_speed_max))
            x, y = route.path.position_at(0.0)
            state = VehicleState(float(x), float(y), v0, route.path.heading_at(0.0), route.rid, 0.0)
            self.vehicles.append(Vehicle(0, state, route, is_ego=True))
            occupied.append((state.x, state.y))
        spawned = spawn_traffic(
            self.scenario,
            rng,
            cfg.traffic,
            ego_arm=cfg.ego_arm if self.task is not None else None,
            occupied=occupied,
            params=cfg.vehicle,
        )
        for k, (state, profile, route) in enumerate(spawned.vehicles, start=1):
            self.vehicles.append(Vehicle(k, state, route, profile=profile))
        self.spawn_shortfall = spawned.shortfall
        self.ego_id = 0
        self.steps = 0
        self.time = 0.0
        self._substep_count = 0
        self.terminated = False
        self.cause = Cause.RUNNING
        self.hv_collisions = 0
        self.emergency_events = 0
        self._yield = {}
        self.trace = [] if record_trace else None
        if self.trace is not None:
            self._record(None, None, {})
        return self.observe() if self.task is not None else None

    @property
    def ego(self) -> Vehicle | None:
        for v in self.vehicles:
            if v.is_ego:
                return v
        return None

    def observe(self) -> ObservationMatrix:
        return observe(self.vehicles, self.ego_id, self.config.perception_range, self.config.n_obs)

    # ------------------------------------------------------------------ stepping
    def step(self, action: MetaAction | int | None = None) -> StepOutcome:
        if self.terminated:
            raise RuntimeError("episode has terminated; call reset() first")
        cfg = self.config
        ego = self.ego
        prev = ego.state if ego is not None else None
        ego_accel = meta_action_to_accel(action) if ego is not None else 0.0
        collided = arrived = False
        for _ in range(cfg.substeps):
            collided, arrived = self._substep(ego_accel)
            if self.trace is not None:
                self._record(action, None, {"collided": collided, "arrived": arrived})
            if collided or arrived:
                break
        self.steps += 1

        if ego is None:
            timed_out = self.steps >= cfg.horizon
            self.terminated = timed_out
            self.cause = Cause.TIMED_OUT if timed_out else Cause.RUNNING
            return StepOutcome(None, 0.0, self.terminated, self.cause, self._info())

        reward = compute_reward(
            prev, ego.state, collided, arrived, cfg.reward, cfg.vehicle.v_max, cfg.decision_dt, cfg.horizon * cfg.decision_dt
        )
        if collided:
            self.cause = Cause.COLLIDED
        elif arrived:
            self.cause = Cause.ARRIVED
        elif self.steps >= cfg.horizon:
            self.cause = Cause.TIMED_OUT
        self.terminated = self.cause != Cause.RUNNING
        if self.trace is not None:
            self.trace[-1]["reward"] = reward
            self.trace[-1]["cause"] = self.cause.value
        return StepOutcome(self.observe(), reward, self.terminated, self.cause, self._info())

    def _info(self) -> dict:
        return {
            "steps": self.steps,
            "hv_collisions": self.hv_collisions,
            "emergency_events": self.emergency_events,
            "spawn_shortfall": self.spawn_shortfall,
        }

    def _hv_accel(self, i: int) -> float:
        cfg = self.config
        veh = self.vehicles[i]
        gap, closing = find_leader(i, self.vehicles, cfg.vehicle, cfg.scenario.lane_width)
        if gap <= 0:
            self.emergency_events += 1
        accel = idm_accel(veh.state.v, gap, closing, veh.profile)
        if self._yield.get(veh.vid) == YieldDecision.YIELD:
            stop_gap = veh.route.s_zone_entry - veh.state.s_route - cfg.vehicle.length / 2
            accel = min(accel, idm_accel(veh.state.v, stop_gap, veh.state.v, veh.profile))
        return accel

    def _substep(self, ego_accel: float) -> tuple[bool, bool]:
        cfg = self.config
        if self._substep_count % cfg.yield_period == 0:
            self._update_yield()
        self._substep_count += 1

        new_states = []
        for i, veh in enumerate(self.vehicles):
            accel = ego_accel if veh.is_ego else self._hv_accel(i)
            steer = lateral_control(veh.state, veh.route.path, cfg.gains, cfg.vehicle)
            nxt = bicycle_step(veh.state, accel, steer, cfg.physics_dt, cfg.vehicle)
            s, _ = veh.route.path.project(nxt.x, nxt.y, veh.state.s_route)
            new_states.append(VehicleState(nxt.x, nxt.y, nxt.v, nxt.psi, nxt.route_id, max(s, veh.state.s_route)))
        for veh, st in zip(self.vehicles, new_states):
            veh.state = st
        self.time += cfg.physics_dt

        ego_collided = False
        crashed: set[int] = set()
        n = len(self.vehicles)
        for a in range(n):
            for b in range(a + 1, n):
                va, vb = self.vehicles[a], self.vehicles[b]
                if vehicles_collide(va.state, vb.state, cfg.vehicle):
                    if va.is_ego or vb.is_ego:
                        ego_collided = True
                    else:
                        crashed.update((va.vid, vb.vid))
        if crashed:
            self.hv_collisions += len(crashed) // 2 or 1
        arrived = False
        keep = []
        for veh in self.vehicles:
            done = veh.state.s_route >= veh.route.length
            if veh.is_ego:
                arrived = done and not ego_collided
                keep.append(veh)
            elif not done and veh.vid not in crashed:
                keep.append(veh)
        self.vehicles = keep
        return ego_collided, arrived

    def _update_yield(self) -> None:
        cfg = self.config
        if not any(not v.is_ego for v in self.vehicles):
            self._yield = {}
            return
        pred = predict_constant_speed(self.vehicles, self.scenario, cfg.yield_horizon, 0.25)
        self._yield = {
            veh.vid: hv_yield_decision(i, self.vehicles, self.scenario, cfg.yield_horizon, cfg.vehicle, 0.25, pred)
            for i, veh in enumerate(self.vehicles)
            if not veh.is_ego
        }

    # ------------------------------------------------------------------ traces
    def _record(self, action, reward, flags: dict) -> None:
        self.trace.append(
            {
                "t": round(self.time, 10),
                "step": self.steps,
                "action": None if action is None else int(action),
                "reward": reward,
                "flags": flags,
                "vehicles": [
                    {
                        "id": v.vid,
                        "ego": v.is_ego,
                        "route": v.route.rid,
                        "x": v.state.x,
                        "y": v.state.y,
                        "v": v.state.v,
                        "psi": v.state.psi,
                    }
                    for v in self.vehicles
                ],
            }
        )
