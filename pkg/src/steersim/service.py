"""Live steering sessions over a persistent JSON channel.

The service exposes one WebSocket endpoint speaking newline-free JSON
messages plus two plain HTTP listing endpoints. Clients create sessions,
step them (or let them auto-run at the simulation rate), inject
waypoints and target speeds mid-episode, and subscribe to a snapshot
stream that pushes one self-contained snapshot after every step.

Client -> server message types: create_session, command, step, subscribe.
Server -> client: session_created, snapshot, ack, error.
"""

from __future__ import annotations

import asyncio
import itertools
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Set

import numpy as np
import torch
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import kinematics
from .conditioning import AgentConditions, ReachParams, TargetSpeed, Waypoint, scheduler_advance
from .core import Action, AgentState
from .data import MapBundle, SyntheticConfig, initialize_agents
from .policy import ControlPolicy, load_checkpoint, policy_step
from .raster import render
from .simulation import _agent_rng, detect_infractions


class ServiceError(Exception):
    def __init__(self, detail: str, kind: str = "error"):
        super().__init__(detail)
        self.detail = detail
        self.kind = kind


@dataclass
class Session:
    """One live rollout owned by its stepping loop (single writer)."""

    session_id: str
    bundle: MapBundle
    policy: ControlPolicy
    seed: int
    dt: float = 0.1
    t: int = 0
    status: str = "running"  # running | paused | ended
    states: List[AgentState] = field(default_factory=list)
    geoms: list = field(default_factory=list)
    agent_ids: list = field(default_factory=list)
    conditions: Dict[str, AgentConditions] = field(default_factory=dict)
    hidden: dict = field(default_factory=dict)
    rngs: dict = field(default_factory=dict)
    reach: ReachParams = field(default_factory=ReachParams)
    last_events: list = field(default_factory=list)
    reached_now: Set[str] = field(default_factory=set)
    subscribers: list = field(default_factory=list)
    auto_task: Optional[asyncio.Task] = None

    def snapshot(self) -> dict:
        agents = []
        for i, aid in enumerate(self.agent_ids):
            state = self.states[i]
            cond = self.conditions[aid]
            waypoint = cond.active_waypoint()
            target = cond.active_target_speed()
            agents.append({
                "id": aid,
                "x": state.x,
                "y": state.y,
                "psi": state.psi,
                "v": state.v,
                "active_waypoint": None if waypoint is None else [waypoint.x, waypoint.y],
                "active_target_speed": None if target is None else target.value,
                "reached": aid in self.reached_now,
            })
        return {
            "type": "snapshot",
            "session": self.session_id,
            "t": self.t,
            "status": self.status,
            "agents": agents,
            "events": list(self.last_events),
        }

    def step_once(self) -> None:
        if self.status != "running":
            raise ServiceError(f"session {self.session_id} is {self.status}", kind="state")
        phases = self.bundle.mesh.light_phases(self.t * self.dt)
        scene = np.array([s.as_array() for s in self.states])
        actions = {}
        for i, aid in enumerate(self.agent_ids):
            cond = self.conditions[aid]
            waypoint = cond.active_waypoint()
            birdview = render(
                i, scene, self.geoms, self.bundle.mesh,
                waypoint=None if waypoint is None else (waypoint.x, waypoint.y),
                light_phases=phases,
                waypoint_radius=self.reach.radius,
                size=self.policy.config.raster_size,
            )
            with torch.no_grad():
                result = policy_step(
                    self.policy, birdview.pixels, self.hidden[aid], cond.active_target_speed(), self.rngs[aid]
                )
            self.hidden[aid] = result.h_next
            actions[aid] = result.action.detach().numpy()

        prev = self.states
        self.states = [
            kinematics.step(
                self.states[i],
                Action(accel=float(actions[aid][0]), steer=float(actions[aid][1])),
                self.dt,
                self.geoms[i],
            )
            for i, aid in enumerate(self.agent_ids)
        ]
        self.t += 1
        self.reached_now = set()
        events = []
        for i, aid in enumerate(self.agent_ids):
            self.conditions[aid], reach = scheduler_advance(self.conditions[aid], self.states[i], self.reach)
            for event in reach:
                self.reached_now.add(aid)
                events.append({"type": "reach", "agent": aid, "kind": event.kind, "index": event.index})
        for infraction in detect_infractions(
            prev, self.states, self.geoms, self.agent_ids, self.bundle.mesh, phases, timestep=self.t
        ):
            events.append({"type": "infraction", "kind": infraction.kind, "agents": list(infraction.agents)})
        self.last_events = events

    def apply_command(self, command: dict) -> None:
        kind = command.get("kind")
        if kind in ("pause", "resume", "end"):
            if kind == "pause":
                self._require_running()
                self.status = "paused"
            elif kind == "resume":
                if self.status == "ended":
                    raise ServiceError("cannot resume an ended session", kind="state")
                self.status = "running"
            else:
                self.status = "ended"
            return
        self._require_running()
        agent = command.get("agent")
        if agent not in self.conditions:
            raise ServiceError(f"unknown agent {agent!r}", kind="not_found")
        if kind == "set_waypoints":
            points = command.get("points", [])
            new = tuple(Waypoint(float(x), float(y)) for x, y in points)
            cond = self.conditions[agent]
            if command.get("append", False):
                remaining = cond.waypoints[cond.waypoint_cursor :]
                self.conditions[agent] = replace(
                    cond, waypoints=remaining + new, waypoint_cursor=0
                )
            else:
                self.conditions[agent] = replace(cond, waypoints=new, waypoint_cursor=0)
        elif kind == "set_target_speed":
            value = command.get("value")
            cond = self.conditions[agent]
            if value is None:
                self.conditions[agent] = replace(cond, target_speeds=(), speed_cursor=0)
            else:
                if float(value) < 0.0:
                    raise ServiceError("target speed must be non-negative", kind="validation")
                self.conditions[agent] = replace(
                    cond, target_speeds=(TargetSpeed(float(value)),), speed_cursor=0
                )
        else:
            raise ServiceError(f"unknown command {kind!r}", kind="validation")

    def _require_running(self) -> None:
        if self.status != "running":
            raise ServiceError(f"session {self.session_id} is {self.status}", kind="state")


class SessionManager:
    def __init__(self, maps_dir: str, checkpoints: Dict[str, str]):
        self.maps_dir = maps_dir
        self.checkpoints = checkpoints
        self.sessions: Dict[str, Session] = {}
        self._policies: Dict[str, ControlPolicy] = {}
        self._counter = itertools.count(1)

    def list_maps(self) -> list:
        if not os.path.isdir(self.maps_dir):
            return []
        return sorted(
            os.path.splitext(name)[0]
            for name in os.listdir(self.maps_dir)
            if name.endswith(".json")
        )

    def list_checkpoints(self) -> list:
        return sorted(self.checkpoints)

    def _policy(self, checkpoint_id: str) -> ControlPolicy:
        if checkpoint_id not in self.checkpoints:
            raise ServiceError(f"unknown checkpoint {checkpoint_id!r}", kind="not_found")
        if checkpoint_id not in self._policies:
            policy, _ = load_checkpoint(self.checkpoints[checkpoint_id])
            policy.eval()
            self._policies[checkpoint_id] = policy
        return self._policies[checkpoint_id]

    def load_bundle(self, map_id: str) -> MapBundle:
        path = os.path.join(self.maps_dir, f"{map_id}.json")
        if not os.path.exists(path):
            raise ServiceError(f"unknown map {map_id!r}", kind="not_found")
        return MapBundle.load(path)

    def create_session(self, map_id: str, checkpoint_id: str, n_agents: int, seed: int) -> Session:
        bundle = self.load_bundle(map_id)
        policy = self._policy(checkpoint_id)
        states, geoms, agent_ids = initialize_agents(bundle, n_agents, seed, SyntheticConfig())
        session = Session(
            session_id=f"s{next(self._counter)}",
            bundle=bundle,
            policy=policy,
            seed=seed,
            states=[AgentState.from_array(row) for row in states],
            geoms=list(geoms),
            agent_ids=list(agent_ids),
            conditions={aid: AgentConditions() for aid in agent_ids},
            hidden={aid: policy.initial_hidden() for aid in agent_ids},
            rngs={aid: _agent_rng(seed, aid) for aid in agent_ids},
        )
        self.sessions[session.session_id] = session
        return session

    def get(self, session_id: str) -> Session:
        if session_id not in self.sessions:
            raise ServiceError(f"unknown session {session_id!r}", kind="not_found")
        return self.sessions[session_id]


async def _broadcast(session: Session) -> None:
    snapshot = session.snapshot()
    dead = []
    for queue in session.subscribers:
        try:
            queue.put_nowait(snapshot)
        except asyncio.QueueFull:
            dead.append(queue)
    for queue in dead:
        session.subscribers.remove(queue)


async def _auto_run(session: Session) -> None:
    """Background 10 Hz stepping while the session is running."""
    try:
        while session.status == "running":
            session.step_once()
            await _broadcast(session)
            await asyncio.sleep(session.dt)
    except asyncio.CancelledError:
        pass


def create_app(maps_dir: str, checkpoints: Dict[str, str]) -> FastAPI:
    """Build the service app; `checkpoints` maps checkpoint ids to paths."""
    app = FastAPI(title="steersim service")
    manager = SessionManager(maps_dir, checkpoints)
    app.state.manager = manager

    @app.get("/maps")
    def get_maps():
        return {"maps": manager.list_maps()}

    @app.get("/maps/{map_id}")
    def get_map(map_id: str):
        try:
            return manager.load_bundle(map_id).to_json()
        except ServiceError as err:
            from fastapi import HTTPException

            raise HTTPException(status_code=404, detail=err.detail)

    @app.get("/checkpoints")
    def get_checkpoints():
        return {"checkpoints": manager.list_checkpoints()}

    @app.websocket("/ws")
    async def websocket_endpoint(socket: WebSocket):
        await socket.accept()
        subscriptions: Dict[str, asyncio.Queue] = {}
        forwarders: Dict[str, asyncio.Task] = {}

        async def forward(queue: asyncio.Queue):
            while True:
                snapshot = await queue.get()
                await socket.send_json(snapshot)

        try:
            while True:
                message = await socket.receive_json()
                try:
                    reply = await _handle_message(manager, subscriptions, message)
                    if reply is not None:
                        await socket.send_json(reply)
                    for session_id, queue in subscriptions.items():
                        if session_id not in forwarders:
                            forwarders[session_id] = asyncio.create_task(forward(queue))
                except ServiceError as err:
                    await socket.send_json({"type": "error", "kind": err.kind, "detail": err.detail})
        except WebSocketDisconnect:
            pass
        finally:
            for task in forwarders.values():
                task.cancel()
            for session_id, queue in subscriptions.items():
                session = manager.sessions.get(session_id)
                if session and queue in session.subscribers:
                    session.subscribers.remove(queue)

    return app


async def _handle_message(manager: SessionManager, session_hook: dict, message: dict) -> Optional[dict]:
    msg_type = message.get("type")
    if msg_type == "create_session":
        session = manager.create_session(
            map_id=message.get("map", ""),
            checkpoint_id=message.get("checkpoint", ""),
            n_agents=int(message.get("n_agents", 1)),
            seed=int(message.get("seed", 0)),
        )
        return {"type": "session_created", "session": session.session_id, "snapshot": session.snapshot()}
    if msg_type == "command":
        session = manager.get(message.get("session", ""))
        command = message.get("command", {})
        session.apply_command(command)
        wants_auto = command.get("kind") == "resume" and command.get("auto", False)
        if wants_auto and (session.auto_task is None or session.auto_task.done()):
            session.auto_task = asyncio.create_task(_auto_run(session))
        if command.get("kind") in ("pause", "end") and session.auto_task is not None:
            session.auto_task.cancel()
            session.auto_task = None
        return {"type": "ack", "detail": command.get("kind", "")}
    if msg_type == "step":
        session = manager.get(message.get("session", ""))
        steps = int(message.get("n", 1))
        for _ in range(steps):
            session.step_once()
            await _broadcast(session)
        return session.snapshot()
    if msg_type == "subscribe":
        session = manager.get(message.get("session", ""))
        queue: asyncio.Queue = asyncio.Queue(maxsize=256)
        session.subscribers.append(queue)
        session_hook[session.session_id] = queue
        return {"type": "ack", "detail": "subscribed"}
    raise ServiceError(f"unknown message type {msg_type!r}", kind="validation")
