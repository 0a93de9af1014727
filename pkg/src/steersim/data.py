"""Dataset plumbing and the synthetic rule-based traffic generator.

Trajectory logs are JSON lines, one scene per line:
    {"location": str, "dt": s, "agents": [{"id", "length", "width",
     "states": [[x, y, psi, v], ...]}]}
A dataset directory holds `manifest.json`, `maps/` and `logs/`. Map files
follow the core MapMesh schema plus an extra "routes" key (lane
centerline polylines) that the scene initializer and the steering
service use; the MapMesh parser ignores it.

The generator drives scripted agents with a car-following longitudinal
rule and lookahead path tracking, obeys fixed-cycle lights, and rejects
any scene containing a collision or offroad excursion, so training data
is infraction-free by construction.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import kinematics
from .core import (
    Action,
    AgentGeometry,
    AgentState,
    MapMesh,
    TrafficLight,
    TrajectorySegment,
    obb_intersects,
    segments_intersect,
    wrap_angle,
)

DATASET_VERSION = 1

LANE_OFFSET = 1.75  # m from road center to lane centerline
ROAD_HALF_WIDTH = 3.5  # m

MAP_FAMILIES = ("straight", "curve", "intersection", "roundabout")


class DatasetError(Exception):
    """Raised for malformed or incompatible dataset files."""


class GenerationError(Exception):
    """Raised when a synthetic scene cannot be realized safely."""


# ---------------------------------------------------------------------------
# Route geometry


class RoutePath:
    """Arclength-parameterized polyline a scripted driver follows."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or len(pts) < 2:
            raise ValueError("route needs at least two points")
        deltas = np.diff(pts, axis=0)
        seg_len = np.hypot(deltas[:, 0], deltas[:, 1])
        keep = np.concatenate([[True], seg_len > 1e-9])
        pts = pts[keep]
        deltas = np.diff(pts, axis=0)
        seg_len = np.hypot(deltas[:, 0], deltas[:, 1])
        self.points = pts
        self.cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.length = float(self.cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.length))
        idx = int(np.searchsorted(self.cum, s, side="right") - 1)
        idx = min(idx, len(self.points) - 2)
        seg = self.cum[idx + 1] - self.cum[idx]
        frac = 0.0 if seg <= 0 else (s - self.cum[idx]) / seg
        return self.points[idx] * (1.0 - frac) + self.points[idx + 1] * frac

    def heading_at(self, s: float) -> float:
        s = float(np.clip(s, 0.0, self.length))
        idx = int(np.searchsorted(self.cum, s, side="right") - 1)
        idx = min(idx, len(self.points) - 2)
        delta = self.points[idx + 1] - self.points[idx]
        return math.atan2(delta[1], delta[0])

    def project_near(self, position, s_hint: float, window: float = 8.0) -> float:
        """Arclength of the closest route point within a window past s_hint."""
        lo = max(0.0, s_hint - 1.0)
        hi = min(self.length, s_hint + window)
        samples = np.arange(lo, hi + 0.25, 0.25)
        pts = np.array([self.point_at(s) for s in samples])
        d = np.hypot(pts[:, 0] - position[0], pts[:, 1] - position[1])
        return float(samples[int(np.argmin(d))])


def _offset_polyline(points, offset: float) -> np.ndarray:
    """Shift a polyline laterally; positive offsets go to the left of travel."""
    pts = np.asarray(points, dtype=float)
    deltas = np.diff(pts, axis=0)
    headings = np.arctan2(deltas[:, 1], deltas[:, 0])
    headings = np.concatenate([headings, headings[-1:]])
    normals = np.stack([-np.sin(headings), np.cos(headings)], axis=1)
    return pts + offset * normals


def _strip_triangles(centerline, half_width: float) -> np.ndarray:
    """Triangulate a constant-width band around a polyline."""
    left = _offset_polyline(centerline, half_width)
    right = _offset_polyline(centerline, -half_width)
    triangles = []
    for i in range(len(left) - 1):
        triangles.append([left[i], right[i], right[i + 1]])
        triangles.append([left[i], right[i + 1], left[i + 1]])
    return np.asarray(triangles)


def _arc(center, radius: float, start_deg: float, end_deg: float, step_deg: float = 6.0) -> np.ndarray:
    n = max(2, int(abs(end_deg - start_deg) / step_deg) + 1)
    angles = np.radians(np.linspace(start_deg, end_deg, n))
    return np.stack([center[0] + radius * np.cos(angles), center[1] + radius * np.sin(angles)], axis=1)


# ---------------------------------------------------------------------------
# Map construction


@dataclass
class MapBundle:
    """A drivable mesh plus the route metadata scripted drivers need."""

    location: str
    mesh: MapMesh
    routes: List[RoutePath]
    family: str

    def to_json(self) -> dict:
        payload = self.mesh.to_json()
        payload["routes"] = [[list(p) for p in route.points] for route in self.routes]
        payload["family"] = self.family
        payload["location"] = self.location
        return payload

    @classmethod
    def from_json(cls, payload: dict, location: str = "") -> "MapBundle":
        mesh = MapMesh.from_json(payload)
        routes = [RoutePath(points) for points in payload.get("routes", [])]
        return cls(
            location=payload.get("location", location),
            mesh=mesh,
            routes=routes,
            family=payload.get("family", "unknown"),
        )

    def save(self, path) -> None:
        with open(path, "w") as handle:
            json.dump(self.to_json(), handle)

    @classmethod
    def load(cls, path) -> "MapBundle":
        with open(path) as handle:
            payload = json.load(handle)
        return cls.from_json(payload, location=os.path.splitext(os.path.basename(path))[0])


def _build_straight(location: str) -> MapBundle:
    center = np.array([[-90.0, 0.0], [90.0, 0.0]])
    mesh = MapMesh(triangles=_strip_triangles(center, ROAD_HALF_WIDTH))
    east = RoutePath([[-88.0, -LANE_OFFSET], [88.0, -LANE_OFFSET]])
    west = RoutePath([[88.0, LANE_OFFSET], [-88.0, LANE_OFFSET]])
    return MapBundle(location=location, mesh=mesh, routes=[east, west], family="straight")


def _curve_centerline() -> np.ndarray:
    inbound = np.array([[-80.0, 0.0], [-30.0, 0.0]])
    arc = _arc((-30.0, 30.0), 30.0, -90.0, 0.0)
    outbound = np.array([[0.0, 30.0], [0.0, 80.0]])
    return np.concatenate([inbound, arc[1:], outbound[1:]])


def _build_curve(location: str) -> MapBundle:
    center = _curve_centerline()
    mesh = MapMesh(triangles=_strip_triangles(center, ROAD_HALF_WIDTH))
    forward = RoutePath(_offset_polyline(center, -LANE_OFFSET))
    backward = RoutePath(_offset_polyline(center, LANE_OFFSET)[::-1])
    return MapBundle(location=location, mesh=mesh, routes=[forward, backward], family="curve")


def _right_turn_arc(approach: str) -> np.ndarray:
    """Right-turn connector inside the intersection box, by approach axis."""
    arcs = {
        "east": _arc((-6.0, -6.0), 6.0 - LANE_OFFSET, 90.0, 0.0),
        "west": _arc((6.0, 6.0), 6.0 - LANE_OFFSET, -90.0, -180.0),
        "north": _arc((6.0, -6.0), 6.0 - LANE_OFFSET, 180.0, 90.0),
        "south": _arc((-6.0, 6.0), 6.0 - LANE_OFFSET, 0.0, -90.0),
    }
    return arcs[approach]


def _build_intersection(location: str) -> MapBundle:
    ew = _strip_triangles(np.array([[-82.0, 0.0], [82.0, 0.0]]), ROAD_HALF_WIDTH)
    ns = _strip_triangles(np.array([[0.0, -82.0], [0.0, 82.0]]), ROAD_HALF_WIDTH)
    triangles = np.concatenate([ew, ns])

    # East-west greens first, then north-south; 1 s all-red buffers.
    green, yellow, red = 7.0, 2.0, 11.0
    lights = (
        TrafficLight(position=(-8.0, -4.5), stop_line=((-8.0, -3.5), (-8.0, 0.0)),
                     green=green, yellow=yellow, red=red, offset=0.0),
        TrafficLight(position=(8.0, 4.5), stop_line=((8.0, 0.0), (8.0, 3.5)),
                     green=green, yellow=yellow, red=red, offset=0.0),
        TrafficLight(position=(4.5, -8.0), stop_line=((0.0, -8.0), (3.5, -8.0)),
                     green=green, yellow=yellow, red=red, offset=10.0),
        TrafficLight(position=(-4.5, 8.0), stop_line=((-3.5, 8.0), (0.0, 8.0)),
                     green=green, yellow=yellow, red=red, offset=10.0),
    )
    mesh = MapMesh(triangles=triangles, traffic_lights=lights)

    through = {
        "east": RoutePath([[-80.0, -LANE_OFFSET], [80.0, -LANE_OFFSET]]),
        "west": RoutePath([[80.0, LANE_OFFSET], [-80.0, LANE_OFFSET]]),
        "north": RoutePath([[LANE_OFFSET, -80.0], [LANE_OFFSET, 80.0]]),
        "south": RoutePath([[-LANE_OFFSET, 80.0], [-LANE_OFFSET, -80.0]]),
    }
    turns = {}
    approach_lead = {
        "east": [[-80.0, -LANE_OFFSET], [-6.0, -LANE_OFFSET]],
        "west": [[80.0, LANE_OFFSET], [6.0, LANE_OFFSET]],
        "north": [[LANE_OFFSET, -80.0], [LANE_OFFSET, -6.0]],
        "south": [[-LANE_OFFSET, 80.0], [-LANE_OFFSET, 6.0]],
    }
    exit_tail = {
        "east": [[-LANE_OFFSET, -6.0], [-LANE_OFFSET, -80.0]],
        "west": [[LANE_OFFSET, 6.0], [LANE_OFFSET, 80.0]],
        "north": [[6.0, -LANE_OFFSET], [80.0, -LANE_OFFSET]],
        "south": [[-6.0, LANE_OFFSET], [-80.0, LANE_OFFSET]],
    }
    for approach in ("east", "west", "north", "south"):
        pts = np.concatenate([
            np.array(approach_lead[approach]),
            _right_turn_arc(approach)[1:],
            np.array(exit_tail[approach])[1:],
        ])
        turns[approach] = RoutePath(pts)
    routes = list(through.values()) + list(turns.values())
    return MapBundle(location=location, mesh=mesh, routes=routes, family="intersection")


def _build_roundabout(location: str) -> MapBundle:
    ring_radius = 12.0
    triangles = []
    angles = np.linspace(0.0, 360.0, 49)
    inner, outer = 8.5, 15.5
    for a0, a1 in zip(angles[:-1], angles[1:]):
        p = [
            np.array([inner * math.cos(math.radians(a0)), inner * math.sin(math.radians(a0))]),
            np.array([outer * math.cos(math.radians(a0)), outer * math.sin(math.radians(a0))]),
            np.array([outer * math.cos(math.radians(a1)), outer * math.sin(math.radians(a1))]),
            np.array([inner * math.cos(math.radians(a1)), inner * math.sin(math.radians(a1))]),
        ]
        triangles.append([p[0], p[1], p[2]])
        triangles.append([p[0], p[2], p[3]])

    arm_axes = {"east": 0.0, "north": 90.0, "west": 180.0, "south": 270.0}
    for angle_deg in arm_axes.values():
        c, s = math.cos(math.radians(angle_deg)), math.sin(math.radians(angle_deg))
        arm = np.array([[13.0 * c, 13.0 * s], [80.0 * c, 80.0 * s]])
        triangles.append(_strip_triangles(arm, ROAD_HALF_WIDTH)[0])
        triangles.append(_strip_triangles(arm, ROAD_HALF_WIDTH)[1])

    def rotate(points, angle_deg):
        rot = math.radians(angle_deg)
        c, s = math.cos(rot), math.sin(rot)
        return np.asarray(points, dtype=float) @ np.array([[c, -s], [s, c]]).T

    stop_signs = []
    routes = []
    # Entry heads toward the circle on the right-hand lane; rotate the east-arm
    # template to each axis. Circulation is counter-clockwise.
    for axis_deg in arm_axes.values():
        entry_angle = axis_deg + 10.0
        for exit_offset in (90.0, 180.0, 270.0):
            exit_axis = (axis_deg + exit_offset) % 360.0
            exit_angle = exit_axis - 10.0
            entry_lane = rotate([[78.0, LANE_OFFSET], [16.0, LANE_OFFSET]], axis_deg)
            sweep_end = exit_angle
            while sweep_end <= entry_angle + 15.0:
                sweep_end += 360.0
            circle = _arc((0.0, 0.0), ring_radius, entry_angle, sweep_end)
            exit_lane = rotate([[16.0, -LANE_OFFSET], [78.0, -LANE_OFFSET]], exit_axis)
            routes.append(RoutePath(np.concatenate([entry_lane, circle, exit_lane])))
        stop_signs.append(rotate([[17.0, LANE_OFFSET]], axis_deg)[0])

    mesh = MapMesh(triangles=np.asarray(triangles), stop_signs=np.asarray(stop_signs))
    return MapBundle(location=location, mesh=mesh, routes=routes, family="roundabout")


_BUILDERS = {
    "straight": _build_straight,
    "curve": _build_curve,
    "intersection": _build_intersection,
    "roundabout": _build_roundabout,
}


def build_map(family: str, location: Optional[str] = None) -> MapBundle:
    if family not in _BUILDERS:
        raise ValueError(f"unknown map family {family!r}")
    return _BUILDERS[family](location or family)


# ---------------------------------------------------------------------------
# Scripted drivers


@dataclass
class ScriptedDriver:
    """Car-following longitudinal rule plus lookahead path tracking."""

    route: RoutePath
    geom: AgentGeometry
    desired_speed: float  # m/s
    headway: float = 1.5  # s
    max_accel: float = 2.5  # m/s^2
    max_decel: float = 3.5  # m/s^2
    min_gap: float = 2.0  # m
    lookahead_gain: float = 0.8  # s of travel used as lookahead distance
    s: float = 0.0  # current arclength along the route
    stop_s_lights: tuple = ()  # (arclength, light_index) pairs on this route
    yield_s: Optional[float] = None  # roundabout merge hold point
    entry_angle: float = 0.0  # deg, merge angle on the circulating ring

    def stopped_wall_accel(self, distance: float, speed: float) -> float:
        gap = max(distance - self.geom.length / 2.0, 1e-3)
        desired_gap = self.min_gap + speed * self.headway + speed * speed / (
            2.0 * math.sqrt(self.max_accel * self.max_decel)
        )
        return self.max_accel * (1.0 - (desired_gap / gap) ** 2)

    def free_accel(self, speed: float) -> float:
        ratio = speed / max(self.desired_speed, 0.1)
        return self.max_accel * (1.0 - ratio**4)

    def follow_accel(self, speed: float, gap: float, lead_speed: float) -> float:
        gap = max(gap, 1e-3)
        closing = speed - lead_speed
        desired_gap = self.min_gap + max(
            0.0, speed * self.headway + speed * closing / (2.0 * math.sqrt(self.max_accel * self.max_decel))
        )
        return self.max_accel * (1.0 - (speed / max(self.desired_speed, 0.1)) ** 4 - (desired_gap / gap) ** 2)

    def steer_toward(self, state: AgentState) -> float:
        lookahead = max(3.0, state.v * self.lookahead_gain)
        target = self.route.point_at(min(self.s + lookahead, self.route.length))
        alpha = wrap_angle(math.atan2(target[1] - state.y, target[0] - state.x) - state.psi)
        curvature = 2.0 * math.sin(alpha) / max(lookahead, 1e-3)
        sin_slip = float(np.clip(curvature * self.geom.length / 2.0, -0.45, 0.45))
        slip = math.asin(sin_slip)
        return float(np.clip(math.atan(2.0 * math.tan(slip)), -0.75, 0.75))


def _leader_gap(state: AgentState, geom: AgentGeometry, others) -> Optional[Tuple[float, float]]:
    """Gap and speed of the nearest vehicle ahead in the driving corridor."""
    best = None
    cos_h, sin_h = math.cos(state.psi), math.sin(state.psi)
    for other_state, other_geom in others:
        dx, dy = other_state.x - state.x, other_state.y - state.y
        forward = dx * cos_h + dy * sin_h
        lateral = -dx * sin_h + dy * cos_h
        if not 0.0 < forward < 60.0 or abs(lateral) > 2.2:
            continue
        if abs(wrap_angle(other_state.psi - state.psi)) > math.pi / 2.0 + 0.2:
            continue
        gap = forward - (geom.length + other_geom.length) / 2.0
        if best is None or gap < best[0]:
            best = (gap, other_state.v)
    return best


def _circle_blocked(entry_angle_deg: float, states: Sequence[AgentState], ring_radius: float = 12.0) -> bool:
    """Whether circulating traffic occupies the merge window upstream of an entry."""
    entry = math.radians(entry_angle_deg)
    for state in states:
        radius = math.hypot(state.x, state.y)
        if not ring_radius - 2.5 <= radius <= ring_radius + 2.5:
            continue
        angle = math.atan2(state.y, state.x)
        upstream = (entry - angle) % (2.0 * math.pi)
        if upstream < math.radians(80.0) or upstream > math.radians(350.0):
            return True
    return False


def _route_light_stops(route: RoutePath, lights) -> tuple:
    """Arclengths at which this route crosses each light's stop line."""
    stops = []
    for light_index, light in enumerate(lights):
        a, b = np.asarray(light.stop_line[0]), np.asarray(light.stop_line[1])
        for i in range(len(route.points) - 1):
            p, q = route.points[i], route.points[i + 1]
            if not segments_intersect(p, q, a, b):
                continue
            d, e = q - p, b - a
            denom = float(np.cross(d, e))
            frac = 0.5 if abs(denom) < 1e-12 else float(np.cross(a - p, e)) / denom
            s_cross = route.cum[i] + float(np.clip(frac, 0.0, 1.0)) * math.hypot(*d)
            stops.append((float(s_cross), light_index))
            break
    return tuple(stops)


def _roundabout_entry_angle(route: RoutePath) -> Optional[float]:
    """Entry merge angle (degrees) for roundabout routes, else None."""
    for i, point in enumerate(route.points):
        if math.hypot(*point) < 13.0:
            return math.degrees(math.atan2(point[1], point[0]))
    return None


def simulate_scene(
    bundle: MapBundle,
    drivers: List[ScriptedDriver],
    steps: int,
    dt: float,
    initial_states: List[AgentState],
) -> np.ndarray:
    """Roll the scripted drivers forward; returns (steps+1, N, 4) states."""
    n = len(drivers)
    states = list(initial_states)
    out = np.zeros((steps + 1, n, 4))
    out[0] = [s.as_array() for s in states]
    lights = bundle.mesh.traffic_lights

    for t in range(steps):
        time = t * dt
        phases = [light.phase_at(time) for light in lights]
        actions = []
        for i, driver in enumerate(drivers):
            state = states[i]
            accel = driver.free_accel(state.v)

            lead = _leader_gap(state, driver.geom, [
                (states[j], drivers[j].geom) for j in range(n) if j != i
            ])
            if lead is not None:
                accel = min(accel, driver.follow_accel(state.v, lead[0], lead[1]))

            for stop_s, light_index in driver.stop_s_lights:
                distance = stop_s - driver.s
                if distance < -1.0:
                    continue
                phase = phases[light_index]
                must_stop = phase == "red" or (
                    phase == "yellow" and distance > state.v**2 / (2.0 * driver.max_decel) + 2.0
                )
                if must_stop and distance > -0.5:
                    accel = min(accel, driver.stopped_wall_accel(max(distance - 0.5, 0.05), state.v))

            if driver.yield_s is not None:
                distance = driver.yield_s - driver.s
                if -0.5 < distance < 12.0 and _circle_blocked(
                    driver.entry_angle, [states[j] for j in range(n) if j != i]
                ):
                    accel = min(accel, driver.stopped_wall_accel(max(distance, 0.05), state.v))

            end_distance = driver.route.length - 3.0 - driver.s
            accel = min(accel, driver.stopped_wall_accel(max(end_distance, 0.05), state.v))

            accel = float(np.clip(accel, -driver.max_decel, driver.max_accel))
            actions.append(Action(accel=accel, steer=driver.steer_toward(state)))

        for i, driver in enumerate(drivers):
            states[i] = kinematics.step(states[i], actions[i], dt, driver.geom)
            driver.s = driver.route.project_near(
                (states[i].x, states[i].y), driver.s, window=max(2.0, states[i].v * dt * 3.0 + 2.0)
            )
        out[t + 1] = [s.as_array() for s in states]
    return out


def _scene_is_clean(bundle: MapBundle, states: np.ndarray, geoms: List[AgentGeometry]) -> bool:
    """No pairwise collisions and every center on the drivable mesh."""
    steps, n = states.shape[:2]
    centers = states[:, :, :2].reshape(-1, 2)
    if not bool(bundle.mesh.contains(centers).all()):
        return False
    for t in range(steps):
        row = [AgentState.from_array(states[t, i]) for i in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                if obb_intersects(row[i], geoms[i], row[j], geoms[j]):
                    return False
    return True


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator knobs; defaults produce desk-scale, diverse traffic."""

    map_families: tuple = MAP_FAMILIES
    n_scenes: int = 16
    agents_per_scene: tuple = (2, 5)  # inclusive range
    desired_speed_range: tuple = (3.0, 16.0)  # m/s, clipped skewed draw
    headway: float = 1.5  # s
    max_accel: float = 2.5  # m/s^2
    max_decel: float = 3.5  # m/s^2
    lookahead_gain: float = 0.8  # s
    episode_length: float = 30.0  # s
    dt: float = 0.1  # s
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.desired_speed_range
        if not (0.0 <= lo <= hi <= 40.0):
            raise ValueError("desired speed range must lie within [0, 40] m/s")
        if self.agents_per_scene[0] < 1 or self.agents_per_scene[0] > self.agents_per_scene[1]:
            raise ValueError("bad agents_per_scene range")
        for name in ("headway", "max_accel", "max_decel", "lookahead_gain", "episode_length", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        unknown = set(self.map_families) - set(MAP_FAMILIES)
        if unknown:
            raise ValueError(f"unknown map families {sorted(unknown)}")

    def to_json(self) -> dict:
        payload = asdict(self)
        payload["map_families"] = list(self.map_families)
        payload["agents_per_scene"] = list(self.agents_per_scene)
        payload["desired_speed_range"] = list(self.desired_speed_range)
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "SyntheticConfig":
        payload = dict(payload)
        for key in ("map_families", "agents_per_scene", "desired_speed_range"):
            if key in payload:
                payload[key] = tuple(payload[key])
        return cls(**payload)


def _draw_desired_speed(config: SyntheticConfig, rng: np.random.Generator) -> float:
    """Right-skewed speed draw: most mass low, thin fast tail."""
    lo, hi = config.desired_speed_range
    return float(np.clip(lo + rng.gamma(2.0, 2.6), lo, hi))


def _spawn_drivers(
    bundle: MapBundle, n_agents: int, config: SyntheticConfig, rng: np.random.Generator
) -> Tuple[List[ScriptedDriver], List[AgentState]]:
    lights = bundle.mesh.traffic_lights
    drivers: List[ScriptedDriver] = []
    states: List[AgentState] = []
    used: Dict[int, List[float]] = {}
    for _ in range(n_agents):
        for _attempt in range(40):
            route_idx = int(rng.integers(len(bundle.routes)))
            route = bundle.routes[route_idx]
            s0 = float(rng.uniform(2.0, max(4.0, route.length * 0.55)))
            if any(abs(s0 - other) < 14.0 for other in used.get(route_idx, [])):
                continue
            position = route.point_at(s0)
            heading = route.heading_at(s0)
            if bundle.family == "intersection" and abs(position[0]) < 10.0 and abs(position[1]) < 10.0:
                continue  # never spawn inside the signal-controlled box
            if any(math.hypot(position[0] - st.x, position[1] - st.y) < 10.0 for st in states):
                continue
            geom = AgentGeometry(length=float(rng.uniform(4.2, 5.2)), width=float(rng.uniform(1.8, 2.1)))
            desired = _draw_desired_speed(config, rng)
            v0 = float(np.clip(rng.uniform(0.4, 0.95) * desired, 0.0, desired))
            driver = ScriptedDriver(
                route=route,
                geom=geom,
                desired_speed=desired,
                headway=config.headway,
                max_accel=config.max_accel,
                max_decel=config.max_decel,
                lookahead_gain=config.lookahead_gain,
                s=s0,
                stop_s_lights=_route_light_stops(route, lights),
            )
            if bundle.family == "roundabout":
                entry = _roundabout_entry_angle(route)
                if entry is not None:
                    driver.yield_s = None
                    entry_s = None
                    for i, point in enumerate(route.points):
                        if math.hypot(*point) < 14.5:
                            entry_s = float(route.cum[max(i - 1, 0)])
                            break
                    if entry_s is not None and s0 < entry_s - 2.0:
                        driver.yield_s = entry_s
                        driver.entry_angle = entry
            used.setdefault(route_idx, []).append(s0)
            drivers.append(driver)
            states.append(AgentState(float(position[0]), float(position[1]), float(heading), v0))
            break
        else:
            raise GenerationError(f"cannot place {n_agents} agents on {bundle.location}")
    return drivers, states


def generate_scene(
    bundle: MapBundle,
    n_agents: int,
    config: SyntheticConfig,
    seed: int,
    label: Optional[str] = None,
    max_tries: int = 25,
) -> Tuple[np.ndarray, List[AgentGeometry], List[str]]:
    """One clean multi-agent episode on the given map; deterministic per seed."""
    steps = int(round(config.episode_length / config.dt))
    label = label or f"{bundle.location}-{seed % 100000}"
    for attempt in range(max_tries):
        rng = np.random.default_rng([seed, attempt])
        try:
            drivers, states = _spawn_drivers(bundle, n_agents, config, rng)
        except GenerationError:
            continue
        trajectory = simulate_scene(bundle, drivers, steps, config.dt, states)
        geoms = [d.geom for d in drivers]
        if _scene_is_clean(bundle, trajectory, geoms):
            ids = [f"{label}-a{i}" for i in range(n_agents)]
            return trajectory, geoms, ids
    raise GenerationError(f"no clean scene on {bundle.location} after {max_tries} tries")


@dataclass(frozen=True)
class DatasetManifest:
    """Index of a dataset directory; paths are relative to the manifest."""

    root: str
    dt: float
    entries: tuple  # of {"location", "map", "log"}
    version: int = DATASET_VERSION

    def map_path(self, entry: dict) -> str:
        return os.path.join(self.root, entry["map"])

    def log_path(self, entry: dict) -> str:
        return os.path.join(self.root, entry["log"])

    def load_bundle(self, location: str) -> MapBundle:
        for entry in self.entries:
            if entry["location"] == location:
                return MapBundle.load(self.map_path(entry))
        raise KeyError(f"unknown location {location!r}")

    def load_meshes(self) -> Dict[str, MapMesh]:
        return {e["location"]: MapBundle.load(self.map_path(e)).mesh for e in self.entries}


def save_dataset(manifest: DatasetManifest, path: Optional[str] = None) -> str:
    """Write the manifest atomically; returns its path."""
    path = path or os.path.join(manifest.root, "manifest.json")
    payload = {
        "version": manifest.version,
        "dt": manifest.dt,
        "entries": list(manifest.entries),
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as handle:
        json.dump(payload, handle, indent=1, sort_keys=True)
    os.replace(tmp, path)
    return path


def load_dataset(path: str) -> DatasetManifest:
    """Read a manifest; raises DatasetError on version mismatch or damage."""
    try:
        with open(path) as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as err:
        raise DatasetError(f"{path}: malformed manifest ({err})") from err
    version = payload.get("version")
    if version != DATASET_VERSION:
        raise DatasetError(f"{path}: dataset version {version} unsupported (expect {DATASET_VERSION})")
    entries = tuple(payload["entries"])
    root = os.path.dirname(os.path.abspath(path))
    for entry in entries:
        for key in ("map", "log"):
            target = os.path.join(root, entry[key])
            if not os.path.exists(target):
                raise DatasetError(f"{path}: missing referenced file {target}")
    return DatasetManifest(root=root, dt=float(payload["dt"]), entries=entries, version=version)


def generate_synthetic(config: SyntheticConfig, out_dir: str) -> DatasetManifest:
    """Build maps and infraction-free trajectory logs under out_dir."""
    maps_dir = os.path.join(out_dir, "maps")
    logs_dir = os.path.join(out_dir, "logs")
    os.makedirs(maps_dir, exist_ok=True)
    os.makedirs(logs_dir, exist_ok=True)

    rng = np.random.default_rng(config.seed)
    entries = []
    for family in config.map_families:
        bundle = build_map(family)
        bundle.save(os.path.join(maps_dir, f"{family}.json"))

    scenes_per_family: Dict[str, list] = {family: [] for family in config.map_families}
    for scene_idx in range(config.n_scenes):
        family = config.map_families[scene_idx % len(config.map_families)]
        bundle = build_map(family)
        n_agents = int(rng.integers(config.agents_per_scene[0], config.agents_per_scene[1] + 1))
        scene_seed = int(np.random.SeedSequence([config.seed, scene_idx]).generate_state(1)[0])
        trajectory, geoms, ids = generate_scene(
            bundle, n_agents, config, scene_seed, label=f"{family}{scene_idx}"
        )
        scenes_per_family[family].append({
            "location": family,
            "dt": config.dt,
            "agents": [
                {
                    "id": ids[i],
                    "length": geoms[i].length,
                    "width": geoms[i].width,
                    "states": [[float(c) for c in row] for row in trajectory[:, i, :]],
                }
                for i in range(len(ids))
            ],
        })

    for family in config.map_families:
        log_rel = os.path.join("logs", f"{family}.jsonl")
        with open(os.path.join(out_dir, log_rel), "w") as handle:
            for scene in scenes_per_family[family]:
                handle.write(json.dumps(scene, sort_keys=True) + "\n")
        entries.append({
            "location": family,
            "map": os.path.join("maps", f"{family}.json"),
            "log": log_rel,
        })

    manifest = DatasetManifest(root=os.path.abspath(out_dir), dt=config.dt, entries=tuple(entries))
    save_dataset(manifest)
    return manifest


def _parse_scene(line: str, line_number: int, path: str) -> dict:
    try:
        scene = json.loads(line)
    except json.JSONDecodeError as err:
        raise DatasetError(f"{path}:{line_number}: malformed scene record ({err})") from err
    if "agents" not in scene:
        raise DatasetError(f"{path}:{line_number}: scene record missing 'agents'")
    return scene


def iter_scenes(manifest: DatasetManifest) -> Iterator[Tuple[dict, dict]]:
    """Yield (entry, scene) pairs in deterministic manifest order."""
    for entry in manifest.entries:
        path = manifest.log_path(entry)
        with open(path) as handle:
            for line_number, line in enumerate(handle, start=1):
                if line.strip():
                    yield entry, _parse_scene(line, line_number, path)


def scene_to_segment(scene: dict, dt: Optional[float] = None, location: str = "") -> TrajectorySegment:
    agents = scene["agents"]
    states = np.stack([np.asarray(a["states"], dtype=float) for a in agents], axis=1)
    present = np.ones(states.shape[:2], dtype=bool)
    geometries = tuple(AgentGeometry(float(a["length"]), float(a["width"])) for a in agents)
    ids = tuple(a["id"] for a in agents)
    return TrajectorySegment(
        dt=float(dt if dt is not None else scene.get("dt", 0.1)),
        states=states,
        present=present,
        geometries=geometries,
        agent_ids=ids,
        location=location or scene.get("location", ""),
    )


def initialize_agents(
    bundle: MapBundle,
    n_agents: int,
    seed: int,
    config: Optional[SyntheticConfig] = None,
) -> Tuple[np.ndarray, List[AgentGeometry], List[str]]:
    """Plausible initial placements on a map's routes (used by live sessions)."""
    config = config or SyntheticConfig()
    rng = np.random.default_rng([seed, 0])
    drivers, states = _spawn_drivers(bundle, n_agents, config, rng)
    arr = np.asarray([s.as_array() for s in states])
    ids = [f"agent-{i}" for i in range(n_agents)]
    return arr, [d.geom for d in drivers], ids


def load_segments(manifest: DatasetManifest, window: int = 40, stride: int = 10) -> List[TrajectorySegment]:
    """Sliding training windows over every scene, in deterministic order.

    Windows where no agent is present throughout are dropped (no ego
    candidate).
    """
    if window < 2 or stride < 1:
        raise ValueError("need window >= 2 and stride >= 1")
    segments: List[TrajectorySegment] = []
    for entry, scene in iter_scenes(manifest):
        full = scene_to_segment(scene, dt=manifest.dt, location=entry["location"])
        total = full.num_steps
        for start in range(0, total - window + 1, stride):
            piece = TrajectorySegment(
                dt=full.dt,
                states=full.states[start : start + window],
                present=full.present[start : start + window],
                geometries=full.geometries,
                agent_ids=full.agent_ids,
                location=full.location,
            )
            if piece.fully_present_agents():
                segments.append(piece)
    return segments
