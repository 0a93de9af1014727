"""Per-agent steering conditions: waypoints and target speeds.

A condition list is consumed one entry at a time through a cursor; the
waypoint and target-speed cursors advance independently, so an agent can
carry either kind of condition or both. Samplers draw training
conditions from a ground-truth track, either spatially (random distances
along the path) or temporally (random timestep increments), and are
deterministic given their random generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import AgentState


@dataclass(frozen=True)
class Waypoint:
    x: float  # m
    y: float  # m

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("non-finite waypoint")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class TargetSpeed:
    value: float  # m/s

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0.0):
            raise ValueError(f"invalid target speed {self.value}")


@dataclass(frozen=True)
class ReachParams:
    """Reach tolerances: waypoint radius and target-speed error band."""

    radius: float = 2.0  # m
    speed_tol: float = 1.0  # m/s

    def __post_init__(self):
        if self.radius <= 0.0 or self.speed_tol <= 0.0:
            raise ValueError("reach tolerances must be positive")


@dataclass(frozen=True)
class ReachEvent:
    kind: str  # "waypoint" | "target_speed"
    index: int  # position in the condition list that was satisfied


@dataclass(frozen=True)
class AgentConditions:
    """Ordered condition lists with independent consumption cursors.

    Cursors index the next active condition; a cursor equal to the list
    length means that kind is exhausted. Empty lists mean the agent is
    unconditioned.
    """

    waypoints: tuple = ()
    target_speeds: tuple = ()
    waypoint_cursor: int = 0
    speed_cursor: int = 0

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        object.__setattr__(self, "target_speeds", tuple(self.target_speeds))
        if not 0 <= self.waypoint_cursor <= len(self.waypoints):
            raise ValueError("waypoint cursor out of range")
        if not 0 <= self.speed_cursor <= len(self.target_speeds):
            raise ValueError("speed cursor out of range")

    @property
    def is_empty(self) -> bool:
        return not self.waypoints and not self.target_speeds

    def active_waypoint(self) -> Optional[Waypoint]:
        if self.waypoint_cursor < len(self.waypoints):
            return self.waypoints[self.waypoint_cursor]
        return None

    def active_target_speed(self) -> Optional[TargetSpeed]:
        if self.speed_cursor < len(self.target_speeds):
            return self.target_speeds[self.speed_cursor]
        return None

    def to_json(self) -> dict:
        return {
            "waypoints": [[w.x, w.y] for w in self.waypoints],
            "target_speeds": [t.value for t in self.target_speeds],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "AgentConditions":
        return cls(
            waypoints=tuple(Waypoint(float(x), float(y)) for x, y in payload.get("waypoints", [])),
            target_speeds=tuple(TargetSpeed(float(v)) for v in payload.get("target_speeds", [])),
        )


def waypoint_reached(state: AgentState, waypoint: Waypoint, radius: float) -> bool:
    """Non-strict reach test: distance to the waypoint center <= radius."""
    return math.hypot(state.x - waypoint.x, state.y - waypoint.y) <= radius


def target_speed_reached(state: AgentState, target: TargetSpeed, speed_tol: float) -> bool:
    """Non-strict reach test: |v - target| <= tolerance."""
    return abs(state.v - target.value) <= speed_tol


def active_conditions(cond: AgentConditions) -> Tuple[Optional[Waypoint], Optional[TargetSpeed]]:
    return cond.active_waypoint(), cond.active_target_speed()


def scheduler_advance(
    cond: AgentConditions, state: AgentState, params: ReachParams
) -> Tuple[AgentConditions, List[ReachEvent]]:
    """Advance each condition kind by at most one entry if its target is reached."""
    events: List[ReachEvent] = []
    waypoint_cursor = cond.waypoint_cursor
    speed_cursor = cond.speed_cursor

    waypoint = cond.active_waypoint()
    if waypoint is not None and waypoint_reached(state, waypoint, params.radius):
        events.append(ReachEvent(kind="waypoint", index=waypoint_cursor))
        waypoint_cursor += 1

    target = cond.active_target_speed()
    if target is not None and target_speed_reached(state, target, params.speed_tol):
        events.append(ReachEvent(kind="target_speed", index=speed_cursor))
        speed_cursor += 1

    if not events:
        return cond, events
    return replace(cond, waypoint_cursor=waypoint_cursor, speed_cursor=speed_cursor), events


def replay_conditions(
    track, cond: AgentConditions, params: ReachParams
) -> Tuple[AgentConditions, List[Tuple[int, ReachEvent]]]:
    """Greedily advance the schedulers along a recorded track.

    Returns the final cursor state and (timestep, event) pairs; timestep 0
    is the track's first state, matching how a rollout advances cursors on
    each newly produced state.
    """
    events: List[Tuple[int, ReachEvent]] = []
    for t, row in enumerate(_as_track(track)):
        cond, step_events = scheduler_advance(cond, AgentState.from_array(row), params)
        events.extend((t, e) for e in step_events)
    return cond, events


def _as_track(track) -> np.ndarray:
    """Coerce a track (sequence of AgentState or (T, 4) array) to (T, 4)."""
    if len(track) and isinstance(track[0], AgentState):
        return np.asarray([s.as_array() for s in track], dtype=float)
    arr = np.asarray(track, dtype=float)
    if arr.size == 0:
        return np.zeros((0, 4))
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def _sample_waypoint_indices(track, d_min: float, d_max: float, count: int, rng: np.random.Generator) -> List[int]:
    """Source timesteps of spatially sampled waypoints (0-based).

    Each round draws a distance d_r ~ U(d_min, d_max) and picks the
    farthest timestep whose position stays within d_r of the current
    anchor. The anchor then jumps to at least one step past itself so
    stationary tracks terminate.
    """
    if not (0.0 < d_min <= d_max):
        raise ValueError("need 0 < d_min <= d_max")
    if count < 1:
        raise ValueError("need at least one condition")
    positions = _as_track(track)[:, :2]
    last = len(positions) - 1
    if last < 0:
        return []
    indices: List[int] = []
    t_target = 0
    while True:
        d_r = rng.uniform(d_min, d_max)
        distances = np.hypot(
            positions[t_target:, 0] - positions[t_target, 0],
            positions[t_target:, 1] - positions[t_target, 1],
        )
        within = np.nonzero(distances <= d_r)[0]
        t_c = t_target + int(within[-1])  # farthest index still within d_r
        indices.append(t_c)
        t_target = max(t_c, t_target + 1)
        if len(indices) >= count or t_target >= last:
            return indices


def sample_waypoints_spatial(
    track, d_min: float, d_max: float, count: int, rng: np.random.Generator
) -> List[Waypoint]:
    """Draw training waypoints spaced by random distances along the track."""
    positions = _as_track(track)[:, :2]
    if len(positions) == 0:
        return []
    indices = _sample_waypoint_indices(positions, d_min, d_max, count, rng)
    return [Waypoint(float(positions[i, 0]), float(positions[i, 1])) for i in indices]


def _sample_target_speed_indices(
    track, dt_min: int, dt_max: int, count: int, rng: np.random.Generator
) -> List[int]:
    """Source timesteps of temporally sampled target speeds (0-based)."""
    if not (1 <= dt_min <= dt_max):
        raise ValueError("need 1 <= dt_min <= dt_max")
    if count < 1:
        raise ValueError("need at least one condition")
    last = len(_as_track(track)) - 1
    if last < 0:
        return []
    indices: List[int] = []
    t_target = 0
    while True:
        delta = int(rng.integers(dt_min, dt_max + 1))
        t_c = min(t_target + delta, last)
        indices.append(t_c)
        t_target = t_c
        if len(indices) >= count or t_target >= last:
            return indices


def sample_target_speeds_temporal(
    track, dt_min: int, dt_max: int, count: int, rng: np.random.Generator
) -> List[TargetSpeed]:
    """Draw training target speeds at random timestep increments."""
    arr = _as_track(track)
    if len(arr) == 0:
        return []
    indices = _sample_target_speed_indices(arr, dt_min, dt_max, count, rng)
    return [TargetSpeed(float(arr[i, 3])) for i in indices]


def last_timestep_condition(track) -> AgentConditions:
    """Single waypoint and target speed taken from the track's final state."""
    arr = _as_track(track)
    if arr.shape[0] < 1:
        raise ValueError("empty track")
    final = arr[-1]
    return AgentConditions(
        waypoints=(Waypoint(float(final[0]), float(final[1])),),
        target_speeds=(TargetSpeed(float(final[3])),),
    )


@dataclass(frozen=True)
class SamplerConfig:
    """Ranges for the training-condition samplers."""

    d_min: float = 5.0  # m
    d_max: float = 25.0  # m
    max_waypoints: int = 10
    dt_min: int = 10  # timesteps
    dt_max: int = 40  # timesteps
    max_target_speeds: int = 10


def sample_conditions(
    track,
    config: SamplerConfig,
    rng: np.random.Generator,
    use_waypoints: bool = True,
    use_target_speeds: bool = True,
) -> AgentConditions:
    """Bundle both samplers into one AgentConditions for a training track."""
    waypoints: Sequence[Waypoint] = ()
    speeds: Sequence[TargetSpeed] = ()
    if use_waypoints:
        waypoints = sample_waypoints_spatial(track, config.d_min, config.d_max, config.max_waypoints, rng)
    if use_target_speeds:
        speeds = sample_target_speeds_temporal(track, config.dt_min, config.dt_max, config.max_target_speeds, rng)
    return AgentConditions(waypoints=tuple(waypoints), target_speeds=tuple(speeds))


def conditions_file_to_map(payload: dict) -> dict:
    """Parse the conditions file schema {"agents": {id: {...}}} into a dict."""
    return {
        str(agent_id): AgentConditions.from_json(entry)
        for agent_id, entry in payload.get("agents", {}).items()
    }
