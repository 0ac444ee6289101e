"""Intersection geometry: four single-lane arms and the twelve routes through them."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ..kinematics import wrap_angle


class Arm(enum.IntEnum):
    SOUTH = 0
    EAST = 1
    NORTH = 2
    WEST = 3


class TaskId(enum.IntEnum):
    TURN_LEFT = 0
    GO_STRAIGHT = 1
    TURN_RIGHT = 2

    @classmethod
    def parse(cls, text: str | int | "TaskId") -> "TaskId":
        if isinstance(text, (int, TaskId)):
            return cls(text)
        key = text.strip().lower().replace("-", "_")
        aliases = {
            "left": cls.TURN_LEFT,
            "turn_left": cls.TURN_LEFT,
            "turnleft": cls.TURN_LEFT,
            "straight": cls.GO_STRAIGHT,
            "go_straight": cls.GO_STRAIGHT,
            "gostraight": cls.GO_STRAIGHT,
            "right": cls.TURN_RIGHT,
            "turn_right": cls.TURN_RIGHT,
            "turnright": cls.TURN_RIGHT,
        }
        if key not in aliases:
            raise ValueError(f"unknown task {text!r}; expected left, straight or right")
        return aliases[key]

    @property
    def short(self) -> str:
        return ("left", "straight", "right")[self]


def route_id(origin: Arm, maneuver: TaskId) -> int:
    return int(origin) * 3 + int(maneuver)


def route_parts(rid: int) -> tuple[Arm, TaskId]:
    return Arm(rid // 3), TaskId(rid % 3)


class Path:
    """Densely sampled polyline with arc-length parametrisation."""

    def __init__(self, points: np.ndarray, headings: np.ndarray, pieces: list[np.ndarray] | None = None):
        pts = np.asarray(points, dtype=np.float64)
        if len(pts) < 2:
            raise ValueError("a path needs at least two points")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0):
            raise ValueError("consecutive path points must be distinct")
        self.points = pts
        self.cum_s = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.length = float(self.cum_s[-1])
        self._seg = seg
        self._seg_len = seg_len
        self._unit = seg / seg_len[:, None]
        self._headings = np.unwrap(np.asarray(headings, dtype=np.float64))
        self.pieces = pieces if pieces is not None else [pts]

    @property
    def centerline(self) -> np.ndarray:
        return self.points

    def position_at(self, s):
        s = np.clip(s, 0.0, self.length)
        return np.interp(s, self.cum_s, self.points[:, 0]), np.interp(s, self.cum_s, self.points[:, 1])

    def heading_at(self, s: float) -> float:
        if s >= self.length:
            return wrap_angle(float(self._headings[-1]))
        return wrap_angle(float(np.interp(max(s, 0.0), self.cum_s, self._headings)))

    def headings_at(self, s: np.ndarray) -> np.ndarray:
        return np.interp(np.clip(s, 0.0, self.length), self.cum_s, self._headings)

    def project(self, x: float, y: float, s_hint: float | None = None, window: tuple[float, float] = (8.0, 16.0)):
        """Closest point on the path, searched near ``s_hint`` when given.

        Returns ``(s, lateral)``; lateral is positive left of the direction of
        travel.  Beyond either end the path is extended along its end tangent.
        """
        if s_hint is None:
            lo, hi = 0, len(self._seg)
        else:
            lo = max(int(np.searchsorted(self.cum_s, s_hint - window[0])) - 1, 0)
            hi = min(int(np.searchsorted(self.cum_s, s_hint + window[1])) + 1, len(self._seg))
            lo = min(lo, len(self._seg) - 1)
            hi = max(hi, lo + 1)
        start = self.points[lo:hi]
        unit = self._unit[lo:hi]
        seg_len = self._seg_len[lo:hi]
        dx = x - start[:, 0]
        dy = y - start[:, 1]
        along = dx * unit[:, 0] + dy * unit[:, 1]
        clipped = np.clip(along, 0.0, seg_len)
        if lo == 0:
            clipped[0] = min(along[0], seg_len[0])
        if hi == len(self._seg):
            clipped[-1] = max(along[-1], 0.0)
        px = dx - clipped * unit[:, 0]
        py = dy - clipped * unit[:, 1]
        k = int(np.argmin(px * px + py * py))
        lateral = unit[k, 0] * dy[k] - unit[k, 1] * dx[k]
        return float(self.cum_s[lo + k] + clipped[k]), float(lateral)


def _line(p0, p1, step: float):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(int(math.ceil(np.hypot(*(p1 - p0)) / step)), 1)
    t = np.linspace(0.0, 1.0, n + 1)
    pts = p0 + t[:, None] * (p1 - p0)
    heading = math.atan2(p1[1] - p0[1], p1[0] - p0[0])
    return pts, np.full(len(pts), heading)


def _arc(center, radius: float, a0: float, a1: float, step: float):
    n = max(int(math.ceil(abs(a1 - a0) * radius / step)), 2)
    ang = np.linspace(a0, a1, n + 1)
    pts = np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)
    direction = 1.0 if a1 > a0 else -1.0
    return pts, ang + direction * math.pi / 2


def _chain(pieces):
    pts = [pieces[0][0]]
    heads = [pieces[0][1]]
    for p, h in pieces[1:]:
        if not np.allclose(pts[-1][-1], p[0], atol=1e-9):
            raise ValueError("route pieces are not continuous")
        pts.append(p[1:])
        heads.append(h[1:])
    return np.concatenate(pts), np.concatenate(heads)


@dataclass(frozen=True)
class ScenarioConfig:
    arm_length: float = 60.0
    lane_width: float = 4.0
    zone_half_width: float = 10.0
    right_turn_radius: float = 8.0
    left_turn_radius: float = 9.0
    exit_length: float = 20.0
    sample_step: float = 0.5


@dataclass
class Route:
    rid: int
    origin: Arm
    maneuver: TaskId
    path: Path
    s_zone_entry: float
    s_zone_exit: float

    @property
    def length(self) -> float:
        return self.path.length


class IntersectionScenario:
    """Cross-shaped single-lane intersection with right-hand traffic.

    World frame: origin at the centre, x east, y north.  The conflict zone is
    the axis-aligned square of half-width ``zone_half_width``.
    """

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.routes: list[Route] = []
        for arm in Arm:
            for maneuver in TaskId:
                self.routes.append(self._build_route(arm, maneuver))
        self.route_conflicts = self._conflict_table(clearance=3.0)

    @property
    def approaches(self) -> list[Arm]:
        return list(Arm)

    @property
    def conflict_zone(self) -> tuple[float, float, float, float]:
        h = self.config.zone_half_width
        return (-h, -h, h, h)

    def in_conflict_zone(self, x, y):
        h = self.config.zone_half_width
        return (np.abs(x) <= h) & (np.abs(y) <= h)

    def route(self, origin: Arm, maneuver: TaskId) -> Route:
        return self.routes[route_id(origin, maneuver)]

    def _conflict_table(self, clearance: float) -> np.ndarray:
        # two routes from different arms conflict when their in-zone centrelines come closer than clearance
        zone_pts = []
        for r in self.routes:
            s = np.arange(r.s_zone_entry, r.s_zone_exit + 1e-9, 0.5)
            zone_pts.append(np.stack(r.path.position_at(s), axis=1))
        n = len(self.routes)
        table = np.zeros((n, n), dtype=bool)
        for a in range(n):
            for b in range(n):
                if self.routes[a].origin == self.routes[b].origin:
                    continue
                d = np.linalg.norm(zone_pts[a][:, None, :] - zone_pts[b][None, :, :], axis=-1)
                table[a, b] = d.min() < clearance
        return table

    def _build_route(self, arm: Arm, maneuver: TaskId) -> Route:
        c = self.config
        h, w, step = c.zone_half_width, c.lane_width, c.sample_step
        half = w / 2
        # geometry for the south arm; other arms are rotated copies
        pieces = [_line((half, -h - c.arm_length), (half, -h), step)]
        if maneuver == TaskId.GO_STRAIGHT:
            pieces.append(_line((half, -h), (half, h), step))
            pieces.append(_line((half, h), (half, h + c.exit_length), step))
        elif maneuver == TaskId.TURN_RIGHT:
            r = c.right_turn_radius
            lead = h - half - r
            if lead > 1e-9:
                pieces.append(_line((half, -h), (half, -h + lead), step))
            pieces.append(_arc((half + r, -h + lead), r, math.pi, math.pi / 2, step))
            if lead > 1e-9:
                pieces.append(_line((half + r, -half), (h, -half), step))
            pieces.append(_line((h, -half), (h + c.exit_length, -half), step))
        else:
            r = c.left_turn_radius
            lead = h + half - r
            if lead > 1e-9:
                pieces.append(_line((half, -h), (half, half - r), step))
            pieces.append(_arc((half - r, half - r), r, 0.0, math.pi / 2, step))
            if lead > 1e-9:
                pieces.append(_line((half - r, half), (-h, half), step))
            pieces.append(_line((-h, half), (-h - c.exit_length, half), step))
        angle = int(arm) * math.pi / 2
        rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        pieces = [(np.round(p @ rot.T, 12), hd + angle) for p, hd in pieces]
        pts, heads = _chain(pieces)
        path = Path(pts, heads, [p for p, _ in pieces])
        zone_len = path.length - c.arm_length - c.exit_length
        return Route(route_id(arm, maneuver), arm, maneuver, path, c.arm_length, c.arm_length + zone_len)


def build_scenario(config: ScenarioConfig | None = None) -> IntersectionScenario:
    config = config or ScenarioConfig()
    if config.lane_width <= 0 or config.arm_length <= 0 or config.exit_length <= 0:
        raise ValueError("arm_length, lane_width and exit_length must be positive")
    if config.arm_length <= config.zone_half_width:
        raise ValueError(
            f"arm_length ({config.arm_length}) must exceed the conflict-zone half-width ({config.zone_half_width})"
        )
    if config.lane_width * 2 > config.zone_half_width * 2 + 1e-9:
        raise ValueError("the conflict zone must be at least as wide as both lanes")
    if not 0 < config.right_turn_radius <= config.zone_half_width - config.lane_width / 2:
        raise ValueError("right_turn_radius must fit inside the conflict zone corner")
    if not 0 < config.left_turn_radius <= config.zone_half_width + config.lane_width / 2:
        raise ValueError("left_turn_radius must fit inside the conflict zone")
    return IntersectionScenario(config)
