"""Closed-loop multi-agent rollouts with condition scheduling.

Stepping is synchronous: every policy-driven agent renders its own
birdview from the same joint state, samples a latent from the prior, and
emits an action; then all agents advance together. Replayed agents
teleport along their ground-truth track. Each agent draws noise from its
own generator keyed by (seed, agent id), so trajectories are invariant
to index permutations and agents can be re-simulated in isolation.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import kinematics
from .conditioning import AgentConditions, ReachParams, scheduler_advance
from .core import (
    Action,
    AgentGeometry,
    AgentState,
    MapMesh,
    TrajectorySegment,
    obb_intersects,
    segments_intersect,
)
from .policy import ControlPolicy, policy_step
from .raster import render

MODES = ("replay", "classmates", "autonomous")


@dataclass(frozen=True)
class RolloutConfig:
    mode: str = "autonomous"
    ego_indices: tuple = ()  # policy-driven set in classmates mode; ego set otherwise
    horizon: int = 40  # steps
    dt: float = 0.1  # s
    stop_on_ego_infraction: bool = False
    seed: int = 0
    reach: ReachParams = field(default_factory=ReachParams)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown rollout mode {self.mode!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        object.__setattr__(self, "ego_indices", tuple(int(i) for i in self.ego_indices))


@dataclass(frozen=True)
class InfractionEvent:
    kind: str  # "collision" | "offroad" | "red_light"
    agents: tuple  # agent ids involved (two for collisions, one otherwise)
    timestep: int


@dataclass(frozen=True)
class ConditionEvent:
    agent_id: str
    kind: str  # "waypoint" | "target_speed"
    index: int
    timestep: int


@dataclass(frozen=True)
class RolloutRecord:
    segment: TrajectorySegment  # produced trajectory, horizon+1 steps
    reach_events: tuple
    infraction_events: tuple
    final_conditions: dict  # agent id -> AgentConditions after the run
    steps_run: int  # may be < horizon when stopped on an ego infraction

    def ego_events(self, agent_id: str) -> list:
        return [e for e in self.reach_events if e.agent_id == agent_id]


def detect_infractions(
    prev_states: Sequence[AgentState],
    states: Sequence[AgentState],
    geoms: Sequence[AgentGeometry],
    agent_ids: Sequence[str],
    mesh: MapMesh,
    light_phases: Sequence[str],
    timestep: int,
) -> List[InfractionEvent]:
    """Collision, offroad, and red-light events for one synchronous step."""
    events: List[InfractionEvent] = []
    n = len(states)
    for i in range(n):
        for j in range(i + 1, n):
            if obb_intersects(states[i], geoms[i], states[j], geoms[j]):
                events.append(InfractionEvent(
                    kind="collision", agents=(agent_ids[i], agent_ids[j]), timestep=timestep,
                ))
    centers = np.array([[s.x, s.y] for s in states])
    on_road = mesh.contains(centers)
    for i in range(n):
        if not bool(on_road[i]):
            events.append(InfractionEvent(kind="offroad", agents=(agent_ids[i],), timestep=timestep))
    for light, phase in zip(mesh.traffic_lights, light_phases):
        if phase != "red":
            continue
        a, b = light.stop_line
        for i in range(n):
            moved = (prev_states[i].x, prev_states[i].y) != (states[i].x, states[i].y)
            if moved and segments_intersect(
                (prev_states[i].x, prev_states[i].y), (states[i].x, states[i].y), a, b
            ):
                events.append(InfractionEvent(kind="red_light", agents=(agent_ids[i],), timestep=timestep))
    return events


def _agent_rng(seed: int, agent_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(agent_id.encode("utf-8"))])


def rollout(
    initial_states: np.ndarray,
    geoms: Sequence[AgentGeometry],
    agent_ids: Sequence[str],
    mesh: MapMesh,
    policy: Optional[ControlPolicy],
    conditions: Optional[Dict[str, AgentConditions]],
    config: RolloutConfig,
    ground_truth: Optional[TrajectorySegment] = None,
) -> RolloutRecord:
    """Run one episode; returns the produced trajectory and its event logs."""
    states = [AgentState.from_array(row) for row in np.asarray(initial_states, dtype=float)]
    n = len(states)
    agent_ids = [str(a) for a in agent_ids]
    geoms = list(geoms)

    if config.mode == "replay":
        policy_driven = set()
    elif config.mode == "classmates":
        policy_driven = set(config.ego_indices)
    else:
        policy_driven = set(range(n))
    replayed = [i for i in range(n) if i not in policy_driven]
    ego_set = set(config.ego_indices) if config.ego_indices else policy_driven

    if replayed and (ground_truth is None or ground_truth.num_steps < config.horizon + 1):
        raise ValueError("replayed agents need ground truth covering the horizon")
    if policy_driven and policy is None:
        raise ValueError("policy-driven agents need a policy")

    sched = {aid: (conditions or {}).get(aid, AgentConditions()) for aid in agent_ids}
    hidden = {i: policy.initial_hidden() for i in policy_driven} if policy is not None else {}
    rngs = {i: _agent_rng(config.seed, agent_ids[i]) for i in policy_driven}

    trajectory = np.zeros((config.horizon + 1, n, 4))
    trajectory[0] = [s.as_array() for s in states]
    present = np.ones((config.horizon + 1, n), dtype=bool)
    reach_events: List[ConditionEvent] = []
    infraction_events: List[InfractionEvent] = []
    steps_run = 0

    for t in range(config.horizon):
        phases = mesh.light_phases(t * config.dt)
        actions: Dict[int, np.ndarray] = {}
        scene = np.array([s.as_array() for s in states])
        for i in sorted(policy_driven):
            cond = sched[agent_ids[i]]
            waypoint = cond.active_waypoint()
            target_speed = cond.active_target_speed()
            birdview = render(
                i,
                scene,
                geoms,
                mesh,
                waypoint=None if waypoint is None else (waypoint.x, waypoint.y),
                light_phases=phases,
                waypoint_radius=config.reach.radius,
                size=policy.config.raster_size,
            )
            with torch.no_grad():
                result = policy_step(policy, birdview.pixels, hidden[i], target_speed, rngs[i])
            hidden[i] = result.h_next
            actions[i] = result.action.detach().numpy()

        prev_states = states
        new_states = []
        for i in range(n):
            if i in policy_driven:
                accel, steer = (float(a) for a in actions[i])
                new_states.append(
                    kinematics.step(states[i], Action(accel=accel, steer=steer), config.dt, geoms[i])
                )
            else:
                new_states.append(AgentState.from_array(ground_truth.states[t + 1, i]))
        states = new_states
        steps_run = t + 1
        trajectory[t + 1] = [s.as_array() for s in states]

        for i in range(n):
            aid = agent_ids[i]
            sched[aid], events = scheduler_advance(sched[aid], states[i], config.reach)
            reach_events.extend(
                ConditionEvent(agent_id=aid, kind=e.kind, index=e.index, timestep=t + 1) for e in events
            )

        step_events = detect_infractions(
            prev_states, states, geoms, agent_ids, mesh, phases, timestep=t + 1
        )
        # Collisions between two replayed agents never terminate an episode;
        # they are kept in the log for completeness.
        infraction_events.extend(step_events)
        if config.stop_on_ego_infraction:
            ego_ids = {agent_ids[i] for i in ego_set}
            replay_ids = {agent_ids[i] for i in replayed}
            terminal = [
                e for e in step_events
                if (set(e.agents) & ego_ids) and not (e.kind == "collision" and set(e.agents) <= replay_ids)
            ]
            if terminal:
                trajectory = trajectory[: t + 2]
                present = present[: t + 2]
                break

    segment = TrajectorySegment(
        dt=config.dt,
        states=trajectory,
        present=present,
        geometries=tuple(geoms),
        agent_ids=tuple(agent_ids),
    )
    return RolloutRecord(
        segment=segment,
        reach_events=tuple(reach_events),
        infraction_events=tuple(infraction_events),
        final_conditions=sched,
        steps_run=steps_run,
    )


def record_to_jsonl(record: RolloutRecord, conditions: Optional[Dict[str, AgentConditions]] = None) -> str:
    """Serialize a rollout as JSON lines, one self-contained line per step."""
    from dataclasses import replace

    segment = record.segment
    sched = {aid: (conditions or {}).get(aid, AgentConditions()) for aid in segment.agent_ids}
    events_by_step: Dict[int, list] = {}
    for event in record.reach_events:
        events_by_step.setdefault(event.timestep, []).append(
            {"type": "reach", "agent": event.agent_id, "kind": event.kind, "index": event.index}
        )
    for event in record.infraction_events:
        events_by_step.setdefault(event.timestep, []).append(
            {"type": "infraction", "kind": event.kind, "agents": list(event.agents)}
        )

    lines = []
    for t in range(segment.num_steps):
        agents = []
        for i, aid in enumerate(segment.agent_ids):
            state = segment.states[t, i]
            waypoint = sched[aid].active_waypoint()
            target = sched[aid].active_target_speed()
            agents.append({
                "id": aid,
                "x": float(state[0]),
                "y": float(state[1]),
                "psi": float(state[2]),
                "v": float(state[3]),
                "active_waypoint": None if waypoint is None else [waypoint.x, waypoint.y],
                "active_target_speed": None if target is None else target.value,
            })
        lines.append(json.dumps({"t": t, "agents": agents, "events": events_by_step.get(t, [])}, sort_keys=True))
        # Replay reach events so the next line reports post-advance cursors.
        for event in record.reach_events:
            if event.timestep != t + 1:
                continue
            cond = sched[event.agent_id]
            if event.kind == "waypoint":
                sched[event.agent_id] = replace(cond, waypoint_cursor=event.index + 1)
            else:
                sched[event.agent_id] = replace(cond, speed_cursor=event.index + 1)
    return "\n".join(lines) + "\n"
