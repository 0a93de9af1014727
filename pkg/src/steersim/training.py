"""Variational training of the driving policy.

Each step replays every non-ego agent from ground truth while the ego
free-runs on its own predictions (classmates-forcing). Conditioning is
enabled per segment with probability p_c; when enabled, the active
waypoint is rendered into the ego birdview and the active target speed
modulates the network, with the condition cursors advancing whenever the
predicted state satisfies a reach test. The loss is the negative ELBO:
a fixed-variance Gaussian reconstruction of the pushed-forward state
plus the KL between the amortized posterior and the unit-normal prior.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

from . import kinematics
from .conditioning import (
    AgentConditions,
    ReachParams,
    SamplerConfig,
    last_timestep_condition,
    sample_conditions,
    scheduler_advance,
)
from .core import AgentState, MapMesh, TrajectorySegment, wrap_angle
from .policy import ControlPolicy, PolicyConfig, policy_step, save_checkpoint
from .raster import render

LOG_TAU = math.log(2.0 * math.pi)

# Fixed standard deviations of the state-space reconstruction likelihood.
SIGMA_POS = 0.5  # m
SIGMA_PSI = 0.1  # rad
SIGMA_V = 0.5  # m/s


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of the optimizer loop and the conditioning scheme."""

    p_c: float = 0.5  # probability a segment trains with conditioning enabled
    segment_steps: int = 40
    dt: float = 0.1  # s
    batch_size: int = 4
    learning_rate: float = 1e-3
    epochs: int = 2
    kl_warmup_frac: float = 0.1  # fraction of steps to ramp the KL weight 0 -> 1
    reach: ReachParams = field(default_factory=ReachParams)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    strategy: str = "sampled"  # "sampled" | "last-timestep" | "none"
    use_waypoints: bool = True
    use_target_speeds: bool = True
    seed: int = 0
    checkpoint_interval: int = 500  # optimizer steps between checkpoints
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        if not 0.0 <= self.p_c <= 1.0:
            raise ValueError("p_c must lie in [0, 1]")
        if self.segment_steps < 2:
            raise ValueError("segments need at least two timesteps")
        if self.strategy not in ("sampled", "last-timestep", "none"):
            raise ValueError(f"unknown condition strategy {self.strategy!r}")

    def to_json(self) -> dict:
        payload = asdict(self)
        payload["policy"]["conv_channels"] = list(self.policy.conv_channels)
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        if "reach" in payload:
            payload["reach"] = ReachParams(**payload["reach"])
        if "sampler" in payload:
            payload["sampler"] = SamplerConfig(**payload["sampler"])
        if "policy" in payload:
            payload["policy"] = PolicyConfig.from_json(payload["policy"])
        return cls(**payload)


def kl_diag_gaussian(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over dimensions."""
    if bool((sigma <= 0).any()):
        raise ValueError("sigma must be strictly positive")
    var = sigma**2
    return 0.5 * (mu**2 + var - 1.0 - torch.log(var)).sum()


def reconstruction_log_prob(
    pred: Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor],
    target: np.ndarray,
    dtype: torch.dtype,
) -> torch.Tensor:
    """Fixed-variance Gaussian log-density of the ground-truth next state."""
    x, y, psi, v = pred
    tx, ty, tpsi, tv = (torch.as_tensor(c, dtype=dtype) for c in target)
    log_p = -0.5 * ((x - tx) ** 2 + (y - ty) ** 2) / SIGMA_POS**2 - LOG_TAU - 2.0 * math.log(SIGMA_POS)
    dpsi = psi - tpsi
    dpsi = dpsi - 2.0 * math.pi * torch.round(dpsi / (2.0 * math.pi))
    log_p = log_p - 0.5 * dpsi**2 / SIGMA_PSI**2 - 0.5 * LOG_TAU - math.log(SIGMA_PSI)
    log_p = log_p - 0.5 * (v - tv) ** 2 / SIGMA_V**2 - 0.5 * LOG_TAU - math.log(SIGMA_V)
    return log_p


class TrainingStepResult(NamedTuple):
    loss: torch.Tensor
    diagnostics: dict


def conditional_training_step(
    policy: ControlPolicy,
    segment: TrajectorySegment,
    mesh: MapMesh,
    ego_index: int,
    conditions: AgentConditions,
    config: TrainConfig,
    rng: np.random.Generator,
    kl_weight: float = 1.0,
) -> TrainingStepResult:
    """Negative-ELBO loss of one segment with optional conditioning.

    Returns the total loss over the segment's T-1 transitions; callers own
    backward() and the optimizer. Raises FloatingPointError on divergence.
    """
    if not segment.present[:, ego_index].all():
        raise ValueError("ego must be present at every step of the segment")
    steps = segment.num_steps
    dtype = policy.dtype
    gt = segment.states
    ego_geom = segment.geometries[ego_index]

    use_condition = bool(rng.random() < config.p_c) and not conditions.is_empty
    sched = conditions if use_condition else AgentConditions()

    # Ground-truth actions feed the posterior; datasets carry states only.
    gt_actions = [
        kinematics.inverse(
            AgentState.from_array(gt[t, ego_index]),
            AgentState.from_array(gt[t + 1, ego_index]),
            segment.dt,
            ego_geom,
        ).action
        for t in range(steps - 1)
    ]

    h = policy.initial_hidden()
    ego = tuple(torch.as_tensor(float(c), dtype=dtype) for c in gt[0, ego_index])
    loss = torch.zeros((), dtype=dtype)
    recon_total = 0.0
    kl_total = 0.0
    reach_events = []

    for t in range(steps - 1):
        scene = gt[t].copy()
        scene[ego_index] = [float(c.detach()) for c in ego]
        waypoint = sched.active_waypoint()
        target_speed = sched.active_target_speed()
        birdview = render(
            ego_index,
            scene,
            segment.geometries,
            mesh,
            waypoint=None if waypoint is None else (waypoint.x, waypoint.y),
            light_phases=mesh.light_phases(t * segment.dt),
            waypoint_radius=config.reach.radius,
            size=policy.config.raster_size,
        )
        gt_action = torch.as_tensor(gt_actions[t].as_array(), dtype=dtype)
        result = policy_step(policy, birdview.pixels, h, target_speed, rng, gt_action=gt_action)

        ego = kinematics.bicycle_update(
            ego[0], ego[1], ego[2], ego[3],
            result.action[0], result.action[1],
            segment.dt, ego_geom.length, xp=torch,
        )
        recon = reconstruction_log_prob(ego, gt[t + 1, ego_index], dtype)
        kl = kl_diag_gaussian(result.posterior_mu, result.posterior_sigma)
        loss = loss - recon + kl_weight * kl
        recon_total += float(recon.detach())
        kl_total += float(kl.detach())
        h = result.h_next

        predicted = AgentState(*(float(c.detach()) for c in ego))
        sched, events = scheduler_advance(sched, predicted, config.reach)
        reach_events.extend((t + 1, e.kind, e.index) for e in events)

    if not bool(torch.isfinite(loss)):
        raise FloatingPointError(
            f"non-finite loss on segment (recon={recon_total:.3f}, kl={kl_total:.3f})"
        )
    diagnostics = {
        "recon": recon_total,
        "kl": kl_total,
        "use_condition": use_condition,
        "reach_events": reach_events,
    }
    return TrainingStepResult(loss=loss, diagnostics=diagnostics)


def gradcheck(
    policy: ControlPolicy,
    batch: Sequence[tuple],
    config: TrainConfig,
    eps: float = 1e-5,
    n_coords: int = 40,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `batch` holds (segment, mesh, ego_index, conditions) tuples. Latent
    noise and the conditioning branch are frozen by replaying the same
    seed for every evaluation, so the loss is a deterministic function of
    the parameters. Requires a double-precision policy.
    """
    if policy.dtype != torch.float64:
        raise ValueError("gradcheck needs a float64 policy")

    def total_loss() -> torch.Tensor:
        loss = torch.zeros((), dtype=torch.float64)
        for idx, (segment, mesh, ego_index, conditions) in enumerate(batch):
            rng = np.random.default_rng(seed + 1000 * idx)
            loss = loss + conditional_training_step(
                policy, segment, mesh, ego_index, conditions, config, rng
            ).loss
        return loss

    params = [p for _, p in sorted(policy.named_parameters(), key=lambda item: item[0])]
    analytic = torch.autograd.grad(total_loss(), params, allow_unused=True)

    flat_sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + flat_sizes)
    picker = np.random.default_rng(seed)
    coords = picker.choice(offsets[-1], size=min(n_coords, offsets[-1]), replace=False)

    max_rel = 0.0
    for flat_index in sorted(int(c) for c in coords):
        param_idx = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        local = flat_index - offsets[param_idx]
        param = params[param_idx]
        flat = param.data.view(-1)
        original = float(flat[local])
        flat[local] = original + eps
        loss_plus = float(total_loss())
        flat[local] = original - eps
        loss_minus = float(total_loss())
        flat[local] = original
        numeric = (loss_plus - loss_minus) / (2.0 * eps)
        grad = analytic[param_idx]
        exact = 0.0 if grad is None else float(grad.view(-1)[local])
        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-6)
        max_rel = max(max_rel, rel)
    return max_rel


def build_segment_conditions(
    segment: TrajectorySegment,
    ego_index: int,
    config: TrainConfig,
    rng: np.random.Generator,
) -> AgentConditions:
    """Conditions for one training segment per the configured strategy."""
    if config.strategy == "none":
        return AgentConditions()
    track = segment.states[:, ego_index, :]
    if config.strategy == "last-timestep":
        cond = last_timestep_condition(track)
        if not config.use_waypoints:
            cond = replace(cond, waypoints=())
        if not config.use_target_speeds:
            cond = replace(cond, target_speeds=())
        return cond
    return sample_conditions(
        track,
        config.sampler,
        rng,
        use_waypoints=config.use_waypoints,
        use_target_speeds=config.use_target_speeds,
    )


class TrainResult(NamedTuple):
    checkpoint_paths: list
    metrics_path: str
    final_loss: float


def train(
    segments: Sequence[TrajectorySegment],
    meshes: Dict[str, MapMesh],
    config: TrainConfig,
    out_dir: str,
) -> TrainResult:
    """Optimize a fresh policy on the given segments; fully seeded.

    Ego selection round-robins over each segment's fully-present agents.
    Emits `ckpt_{step}.bin` checkpoints and a JSON-lines metrics log with
    one record per optimizer step.
    """
    if not segments:
        raise ValueError("empty training set")
    os.makedirs(out_dir, exist_ok=True)
    torch.set_num_threads(1)

    policy = ControlPolicy(config.policy, seed=config.seed)
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    order = np.arange(len(segments))
    steps_per_epoch = max(1, math.ceil(len(segments) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = max(1, int(round(config.kl_warmup_frac * total_steps)))

    checkpoint_paths = []

    def emit_checkpoint(step: int) -> None:
        path = os.path.join(out_dir, f"ckpt_{step}.bin")
        save_checkpoint(policy, path, train_config=config.to_json(), seed=config.seed, step=step)
        checkpoint_paths.append(path)

    emit_checkpoint(0)
    metrics_path = os.path.join(out_dir, "train_metrics.jsonl")
    step = 0
    ego_counter = 0
    last_loss = math.nan

    with open(metrics_path, "w") as log:
        for _ in range(config.epochs):
            rng.shuffle(order)
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                optimizer.zero_grad()
                batch_loss = torch.zeros((), dtype=policy.dtype)
                recon = kl = 0.0
                conditioned = 0
                for seg_idx in batch:
                    segment = segments[int(seg_idx)]
                    eligible = segment.fully_present_agents()
                    if not eligible:
                        continue
                    ego_index = eligible[ego_counter % len(eligible)]
                    ego_counter += 1
                    conditions = build_segment_conditions(segment, ego_index, config, rng)
                    mesh = meshes[segment.location]
                    result = conditional_training_step(
                        policy, segment, mesh, ego_index, conditions, config, rng,
                        kl_weight=min(1.0, (step + 1) / warmup_steps),
                    )
                    batch_loss = batch_loss + result.loss
                    recon += result.diagnostics["recon"]
                    kl += result.diagnostics["kl"]
                    conditioned += int(result.diagnostics["use_condition"])
                batch_loss = batch_loss / max(1, len(batch))
                batch_loss.backward()
                torch.nn.utils.clip_grad_norm_(policy.parameters(), 10.0)
                optimizer.step()
                step += 1
                last_loss = float(batch_loss.detach())
                record = {
                    "step": step,
                    "loss": last_loss,
                    "recon": recon / max(1, len(batch)),
                    "kl": kl / max(1, len(batch)),
                    "conditioned": conditioned,
                    "unconditioned": len(batch) - conditioned,
                }
                log.write(json.dumps(record, sort_keys=True) + "\n")
                if step % config.checkpoint_interval == 0:
                    emit_checkpoint(step)

    if not checkpoint_paths or not checkpoint_paths[-1].endswith(f"ckpt_{step}.bin"):
        emit_checkpoint(step)
    return TrainResult(checkpoint_paths=checkpoint_paths, metrics_path=metrics_path, final_loss=last_loss)
