"""Controllable multi-agent driving behavior simulation.

A recurrent latent-variable policy drives agents from ego-centric
birdview rasters; agents can be steered with ordered waypoint lists
(rendered into their observation) and per-agent target speeds (injected
through learned feature-wise modulation). The package also ships a
synthetic rule-based traffic generator, a rollout simulator with
infraction detection, an evaluation metric suite, a CLI, and a live
steering service.
"""

from .conditioning import (
    AgentConditions,
    ReachParams,
    SamplerConfig,
    TargetSpeed,
    Waypoint,
    last_timestep_condition,
    sample_target_speeds_temporal,
    sample_waypoints_spatial,
    scheduler_advance,
    target_speed_reached,
    waypoint_reached,
)
from .core import (
    Action,
    AgentGeometry,
    AgentState,
    MapMesh,
    TrafficLight,
    TrajectorySegment,
    obb_corners,
    obb_intersects,
    wrap_angle,
)
from .kinematics import inverse, step
from .metrics import build_report, displacement_metrics, reach_and_infraction_rates
from .policy import ControlPolicy, PolicyConfig, load_checkpoint, policy_step, save_checkpoint
from .raster import BirdviewRaster, render, world_to_raster
from .simulation import RolloutConfig, RolloutRecord, detect_infractions, rollout
from .training import TrainConfig, conditional_training_step, gradcheck, kl_diag_gaussian, train

__version__ = "0.1.0"
