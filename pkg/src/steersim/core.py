"""Shared scene types and 2D oriented-bounding-box geometry.

All values are SI: meters, seconds, radians, meters/second. Headings are
wrapped to (-pi, pi] project-wide so state comparisons are well-defined.
Everything here is immutable after construction and safe to share across
workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TAU = 2.0 * math.pi

# Action bounds, enforced by the kinematics layer before integration.
ACCEL_MAX = 5.0  # m/s^2
STEER_MAX = 0.8  # rad


def wrap_angle(angle):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    return angle - TAU * np.ceil((angle - math.pi) / TAU)


@dataclass(frozen=True)
class AgentState:
    """Pose of one agent at one timestep: planar position, heading, speed."""

    x: float  # m
    y: float  # m
    psi: float  # rad, in (-pi, pi]
    v: float  # m/s, >= 0

    def __post_init__(self):
        values = (self.x, self.y, self.psi, self.v)
        if not all(math.isfinite(f) for f in values):
            raise ValueError(f"non-finite agent state {values}")
        if self.v < 0.0:
            raise ValueError(f"negative speed {self.v}")
        object.__setattr__(self, "psi", float(wrap_angle(self.psi)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v])

    @classmethod
    def from_array(cls, arr) -> "AgentState":
        x, y, psi, v = (float(c) for c in arr)
        return cls(x, y, psi, v)


@dataclass(frozen=True)
class AgentGeometry:
    """Footprint of an agent's rotated bounding box."""

    length: float  # m, along heading
    width: float  # m, across heading

    def __post_init__(self):
        if not (self.length > 0.0 and self.width > 0.0):
            raise ValueError(f"degenerate geometry {self.length}x{self.width}")


@dataclass(frozen=True)
class Action:
    """Acceleration and front-wheel steering angle."""

    accel: float  # m/s^2
    steer: float  # rad

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.steer])


@dataclass(frozen=True)
class TrafficLight:
    """Fixed-cycle signal guarding one stop line."""

    position: tuple  # (x, y) of the signal head
    stop_line: tuple  # ((x1, y1), (x2, y2)) segment agents must not cross on red
    green: float  # s
    yellow: float  # s
    red: float  # s
    offset: float = 0.0  # s, phase shift of the cycle

    def __post_init__(self):
        if min(self.green, self.yellow, self.red) <= 0.0:
            raise ValueError("cycle durations must be positive")

    @property
    def cycle(self) -> float:
        return self.green + self.yellow + self.red

    def phase_at(self, time: float) -> str:
        tau = (time + self.offset) % self.cycle
        if tau < self.green:
            return "green"
        if tau < self.green + self.yellow:
            return "yellow"
        return "red"


@dataclass(frozen=True)
class MapMesh:
    """Drivable area as a triangle soup plus traffic controls."""

    triangles: np.ndarray  # (M, 3, 2) vertices in meters
    traffic_lights: tuple = ()
    stop_signs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        tri = np.asarray(self.triangles, dtype=float).reshape(-1, 3, 2)
        areas = _triangle_areas(tri)
        if np.any(areas <= 1e-9):
            raise ValueError("degenerate triangle in drivable mesh")
        object.__setattr__(self, "triangles", tri)
        object.__setattr__(self, "stop_signs", np.asarray(self.stop_signs, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "traffic_lights", tuple(self.traffic_lights))

    def light_phases(self, time: float) -> list:
        return [light.phase_at(time) for light in self.traffic_lights]

    def contains(self, points) -> np.ndarray:
        """Whether each query point lies inside at least one drivable triangle."""
        return points_in_any_triangle(np.asarray(points, dtype=float), self.triangles)

    def to_json(self) -> dict:
        return {
            "triangles": [list(tri.reshape(6)) for tri in self.triangles],
            "traffic_lights": [
                {
                    "position": list(light.position),
                    "stop_line": [list(light.stop_line[0]), list(light.stop_line[1])],
                    "green": light.green,
                    "yellow": light.yellow,
                    "red": light.red,
                    "offset": light.offset,
                }
                for light in self.traffic_lights
            ],
            "stop_signs": [list(p) for p in self.stop_signs],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "MapMesh":
        triangles = np.array([np.reshape(t, (3, 2)) for t in payload["triangles"]], dtype=float)
        lights = tuple(
            TrafficLight(
                position=tuple(entry["position"]),
                stop_line=(tuple(entry["stop_line"][0]), tuple(entry["stop_line"][1])),
                green=float(entry["green"]),
                yellow=float(entry["yellow"]),
                red=float(entry["red"]),
                offset=float(entry.get("offset", 0.0)),
            )
            for entry in payload.get("traffic_lights", [])
        )
        stop_signs = np.array(payload.get("stop_signs", []), dtype=float).reshape(-1, 2)
        return cls(triangles=triangles, traffic_lights=lights, stop_signs=stop_signs)

    def save(self, path) -> None:
        with open(path, "w") as handle:
            json.dump(self.to_json(), handle)

    @classmethod
    def load(cls, path) -> "MapMesh":
        with open(path) as handle:
            return cls.from_json(json.load(handle))


@dataclass(frozen=True)
class TrajectorySegment:
    """A T x N window of agent states with presence mask and footprints."""

    dt: float  # s between consecutive rows
    states: np.ndarray  # (T, N, 4) of [x, y, psi, v]
    present: np.ndarray  # (T, N) bool
    geometries: tuple  # N AgentGeometry
    agent_ids: tuple  # N opaque identifiers
    location: str = ""  # map lookup key, empty when unknown

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 3 or states.shape[2] != 4:
            raise ValueError(f"states must be (T, N, 4), got {states.shape}")
        steps, agents = states.shape[:2]
        if steps < 2:
            raise ValueError("segment needs at least two timesteps")
        if agents < 1:
            raise ValueError("segment needs at least one agent")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        present = np.asarray(self.present, dtype=bool)
        if present.shape != (steps, agents):
            raise ValueError("presence mask shape mismatch")
        if not np.all(np.isfinite(states[present])):
            raise ValueError("non-finite state marked present")
        if len(self.geometries) != agents or len(self.agent_ids) != agents:
            raise ValueError("geometry/id count mismatch")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "present", present)
        object.__setattr__(self, "geometries", tuple(self.geometries))
        object.__setattr__(self, "agent_ids", tuple(str(a) for a in self.agent_ids))

    @property
    def num_steps(self) -> int:
        return self.states.shape[0]

    @property
    def num_agents(self) -> int:
        return self.states.shape[1]

    def state_at(self, t: int, agent: int) -> AgentState:
        return AgentState.from_array(self.states[t, agent])

    def fully_present_agents(self) -> list:
        """Indices of agents present at every timestep of the window."""
        return [i for i in range(self.num_agents) if bool(self.present[:, i].all())]


def obb_corners(state: AgentState, geom: AgentGeometry) -> np.ndarray:
    """Corners of the agent's rotated footprint, counter-clockwise from front-left."""
    half_l, half_w = geom.length / 2.0, geom.width / 2.0
    local = np.array([
        [half_l, half_w],
        [-half_l, half_w],
        [-half_l, -half_w],
        [half_l, -half_w],
    ])
    c, s = math.cos(state.psi), math.sin(state.psi)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([state.x, state.y])


def obb_intersects(
    a_state: AgentState,
    a_geom: AgentGeometry,
    b_state: AgentState,
    b_geom: AgentGeometry,
) -> bool:
    """Separating-axis overlap test for two rotated rectangles.

    Touching boundaries count as intersecting (conservative for collision
    metrics).
    """
    # Cheap reject: disjoint bounding circles.
    radius_a = math.hypot(a_geom.length, a_geom.width) / 2.0
    radius_b = math.hypot(b_geom.length, b_geom.width) / 2.0
    if math.hypot(a_state.x - b_state.x, a_state.y - b_state.y) > radius_a + radius_b:
        return False

    corners_a = obb_corners(a_state, a_geom)
    corners_b = obb_corners(b_state, b_geom)
    # A rectangle contributes two unique edge normals.
    for psi in (a_state.psi, b_state.psi):
        c, s = math.cos(psi), math.sin(psi)
        for axis in ((c, s), (-s, c)):
            proj_a = corners_a @ axis
            proj_b = corners_b @ axis
            if proj_a.max() < proj_b.min() or proj_b.max() < proj_a.min():
                return False
    return True


def _triangle_areas(triangles: np.ndarray) -> np.ndarray:
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    return 0.5 * np.abs(np.cross(b - a, c - a))


def points_in_any_triangle(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Vectorized point-in-union-of-triangles test (boundary counts as inside)."""
    points = np.atleast_2d(points)
    if triangles.shape[0] == 0:
        return np.zeros(points.shape[0], dtype=bool)
    a = triangles[:, 0][:, None, :]  # (M, 1, 2)
    b = triangles[:, 1][:, None, :]
    c = triangles[:, 2][:, None, :]
    p = points[None, :, :]  # (1, P, 2)
    d1 = np.cross(b - a, p - a)
    d2 = np.cross(c - b, p - b)
    d3 = np.cross(a - c, p - c)
    eps = 1e-12
    inside = ((d1 >= -eps) & (d2 >= -eps) & (d3 >= -eps)) | (
        (d1 <= eps) & (d2 <= eps) & (d3 <= eps)
    )
    return inside.any(axis=0)


def segments_intersect(p1, p2, q1, q2) -> bool:
    """Whether segments p1-p2 and q1-q2 intersect (touching counts)."""
    p1, p2, q1, q2 = (np.asarray(v, dtype=float) for v in (p1, p2, q1, q2))

    def orient(a, b, c):
        return float(np.cross(b - a, c - a))

    def on_segment(a, b, c):
        return (
            min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
            and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12
        )

    o1 = orient(p1, p2, q1)
    o2 = orient(p1, p2, q2)
    o3 = orient(q1, q2, p1)
    o4 = orient(q1, q2, p2)
    if ((o1 > 0) != (o2 > 0)) and ((o3 > 0) != (o4 > 0)) and o1 != 0 and o2 != 0 and o3 != 0 and o4 != 0:
        return True
    if o1 == 0 and on_segment(p1, p2, q1):
        return True
    if o2 == 0 and on_segment(p1, p2, q2):
        return True
    if o3 == 0 and on_segment(q1, q2, p1):
        return True
    if o4 == 0 and on_segment(q1, q2, p2):
        return True
    return False
