"""Bicycle-model state transition and closed-form action recovery.

The reference point is the geometric center of the agent's bounding box,
with equal front/rear half-lengths (l_f = l_r = L/2). Discretization is
explicit Euler at the simulation rate; actions are clamped to bounds
before integration so out-of-range policy outputs stay physical.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .core import ACCEL_MAX, STEER_MAX, TAU, Action, AgentGeometry, AgentState, wrap_angle


def bicycle_update(x, y, psi, v, accel, steer, dt: float, length, xp=np):
    """One Euler step of the center-referenced kinematic bicycle.

    Works elementwise on plain floats, numpy arrays, or torch tensors
    (pass ``xp=torch``); the torch path stays differentiable.
    """
    accel = xp.clip(accel, -ACCEL_MAX, ACCEL_MAX)
    steer = xp.clip(steer, -STEER_MAX, STEER_MAX)
    slip = xp.arctan(0.5 * xp.tan(steer))
    new_x = x + v * xp.cos(psi + slip) * dt
    new_y = y + v * xp.sin(psi + slip) * dt
    new_psi = psi + v / (0.5 * length) * xp.sin(slip) * dt
    new_psi = new_psi - TAU * xp.ceil((new_psi - math.pi) / TAU)
    new_v = xp.clip(v + accel * dt, 0.0, None)
    return new_x, new_y, new_psi, new_v


def step(state: AgentState, action: Action, dt: float, geom: AgentGeometry) -> AgentState:
    """Advance one agent by dt under the given action."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if not all(math.isfinite(f) for f in (action.accel, action.steer)):
        raise ValueError(f"non-finite action {action}")
    x, y, psi, v = bicycle_update(
        state.x, state.y, state.psi, state.v, action.accel, action.steer, dt, geom.length
    )
    return AgentState(float(x), float(y), float(psi), float(v))


class InverseResult(NamedTuple):
    action: Action
    approximate: bool  # True when no in-bounds action maps prev to next exactly


def inverse(prev: AgentState, next: AgentState, dt: float, geom: AgentGeometry) -> InverseResult:
    """Recover the action that `step` maps prev to next.

    Exact in closed form for on-model transitions. For off-model data
    (recorded trajectories) the heading and speed residuals are matched
    exactly where identifiable and the result is flagged approximate;
    v = 0 with a nonzero heading change leaves the steering
    unidentifiable and returns steer = 0.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")

    approximate = False
    accel = (next.v - prev.v) / dt
    if not -ACCEL_MAX <= accel <= ACCEL_MAX:
        accel = float(np.clip(accel, -ACCEL_MAX, ACCEL_MAX))
        approximate = True

    dpsi = float(wrap_angle(next.psi - prev.psi))
    if prev.v * dt < 1e-9:
        steer = 0.0
        if abs(dpsi) > 1e-9:
            approximate = True
    else:
        sin_slip = dpsi * 0.5 * geom.length / (prev.v * dt)
        if abs(sin_slip) > 1.0:
            sin_slip = math.copysign(1.0, sin_slip)
            approximate = True
        slip = math.asin(sin_slip)
        steer = math.atan(2.0 * math.tan(slip))
        if not -STEER_MAX <= steer <= STEER_MAX:
            steer = float(np.clip(steer, -STEER_MAX, STEER_MAX))
            approximate = True

    action = Action(accel=accel, steer=steer)
    if not approximate:
        reconstructed = step(prev, action, dt, geom)
        residual = max(
            abs(reconstructed.x - next.x),
            abs(reconstructed.y - next.y),
            abs(wrap_angle(reconstructed.psi - next.psi)),
            abs(reconstructed.v - next.v),
        )
        if residual > 1e-6:
            approximate = True
    return InverseResult(action=action, approximate=approximate)
