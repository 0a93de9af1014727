"""Command-line entry points.

Subcommands: generate-data, train, eval, rollout, render, serve. Every
subcommand is byte-reproducible under a fixed --seed; reports and logs
carry no timestamps.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import metrics as metrics_mod
from .conditioning import (
    AgentConditions,
    ReachParams,
    SamplerConfig,
    conditions_file_to_map,
    last_timestep_condition,
    replay_conditions,
    sample_conditions,
)
from .core import MapMesh, TrajectorySegment
from .data import (
    DatasetManifest,
    MapBundle,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    load_segments,
    scene_to_segment,
    iter_scenes,
)
from .policy import load_checkpoint
from .raster import render, save_png
from .simulation import ConditionEvent, RolloutConfig, record_to_jsonl, rollout
from .training import TrainConfig, train

CONDITION_CHOICES = ("none", "w", "ts", "w+ts")
STRATEGY_CHOICES = ("sampled", "last-timestep")


def _filter_conditions(cond: AgentConditions, mode: str) -> AgentConditions:
    """Keep only the condition kinds the policy is allowed to see."""
    return AgentConditions(
        waypoints=cond.waypoints if mode in ("w", "w+ts") else (),
        target_speeds=cond.target_speeds if mode in ("ts", "w+ts") else (),
    )


def build_eval_conditions(
    segment: TrajectorySegment,
    ego_index: int,
    strategy: str,
    sampler,
    reach: ReachParams,
    rng: np.random.Generator,
) -> AgentConditions:
    """Measurement conditions from the ego's ground-truth track."""
    track = segment.states[:, ego_index, :]
    if strategy == "last-timestep":
        return last_timestep_condition(track)
    return sample_conditions(track, sampler, rng)


def eval_checkpoint(
    checkpoint_path: str,
    manifest: DatasetManifest,
    samples: int = 6,
    horizon_steps: int = 40,
    conditions_mode: str = "w+ts",
    strategy: str = "sampled",
    seed: int = 0,
    max_segments: Optional[int] = 200,
    group_label: Optional[str] = None,
) -> dict:
    """Classmates-forcing evaluation over held-out windows.

    Each window provides the initial joint state; the ego then free-runs
    for horizon_steps - 1 predicted steps while classmates replay ground
    truth. Conditions are derived from the ego's ground-truth future per
    `strategy` and are always measured; `conditions_mode` controls which
    kinds the policy actually observes. Returns the report dict.
    """
    if conditions_mode not in CONDITION_CHOICES:
        raise ValueError(f"conditions must be one of {CONDITION_CHOICES}")
    if strategy not in STRATEGY_CHOICES:
        raise ValueError(f"strategy must be one of {STRATEGY_CHOICES}")
    torch.set_num_threads(1)
    policy, header = load_checkpoint(checkpoint_path)
    policy.eval()
    train_cfg = header.get("train_config") or {}
    sampler_cfg = train_cfg.get("sampler")
    sampler = SamplerConfig(**sampler_cfg) if sampler_cfg else SamplerConfig()
    reach = ReachParams(**train_cfg.get("reach", {})) if train_cfg.get("reach") else ReachParams()

    meshes = manifest.load_meshes()
    windows = load_segments(manifest, window=horizon_steps, stride=horizon_steps)
    if max_segments is not None:
        windows = windows[:max_segments]
    if not windows:
        raise ValueError(
            f"dataset has no windows of {horizon_steps} steps; horizon exceeds ground truth"
        )

    displacement_rows = []
    outcomes = []
    all_speeds = []
    ego_counter = 0
    for seg_idx, segment in enumerate(windows):
        eligible = segment.fully_present_agents()
        ego_index = eligible[ego_counter % len(eligible)]
        ego_counter += 1
        cond_rng = np.random.default_rng([seed, 101, seg_idx])
        measurement = build_eval_conditions(segment, ego_index, strategy, sampler, reach, cond_rng)
        visible = _filter_conditions(measurement, conditions_mode)
        ego_id = segment.agent_ids[ego_index]
        mesh = meshes[segment.location]

        sample_tracks = []
        for k in range(samples):
            config = RolloutConfig(
                mode="classmates",
                ego_indices=(ego_index,),
                horizon=segment.num_steps - 1,
                dt=segment.dt,
                seed=int(np.random.SeedSequence([seed, seg_idx, k]).generate_state(1)[0]),
                reach=reach,
            )
            record = rollout(
                initial_states=segment.states[0],
                geoms=segment.geometries,
                agent_ids=segment.agent_ids,
                mesh=mesh,
                policy=policy,
                conditions={ego_id: visible},
                config=config,
                ground_truth=segment,
            )
            ego_track = record.segment.states[:, ego_index, :]
            sample_tracks.append(ego_track[:, :2])
            all_speeds.append(ego_track[:, 3])

            _, replay_events = replay_conditions(ego_track, measurement, reach)
            events = [
                ConditionEvent(agent_id=ego_id, kind=e.kind, index=e.index, timestep=t)
                for t, e in replay_events
            ]
            outcomes.append(
                metrics_mod.episode_outcome(record, ego_id, measurement, reach_events=events)
            )

        gt_track = segment.states[:, ego_index, :2]
        displacement_rows.append(metrics_mod.displacement_metrics(np.stack(sample_tracks), gt_track))

    group = dict(metrics_mod.reach_and_infraction_rates(outcomes))
    for key in ("ade", "min_ade", "fde", "min_fde", "miss_rate", "mfd"):
        group[key] = float(np.mean([row[key] for row in displacement_rows]))
    label = group_label or f"{os.path.basename(checkpoint_path)}/{conditions_mode}"
    report = metrics_mod.build_report({label: group}, speeds=np.concatenate(all_speeds))
    report["protocol"] = {
        "checkpoint": os.path.basename(checkpoint_path),
        "samples": samples,
        "horizon_steps": horizon_steps,
        "conditions": conditions_mode,
        "strategy": strategy,
        "seed": seed,
        "segments": len(windows),
    }
    return report


def _cmd_generate_data(args) -> int:
    if args.config:
        with open(args.config) as handle:
            config = SyntheticConfig.from_json(json.load(handle))
    else:
        config = SyntheticConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    manifest = generate_synthetic(config, args.out)
    scenes = sum(1 for _ in iter_scenes(manifest))
    print(f"wrote {scenes} scenes across {len(manifest.entries)} locations to {args.out}")
    return 0


def _cmd_train(args) -> int:
    if args.config:
        with open(args.config) as handle:
            config = TrainConfig.from_json(json.load(handle))
    else:
        config = TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    manifest = load_dataset(os.path.join(args.data, "manifest.json"))
    segments = load_segments(manifest, window=config.segment_steps, stride=args.stride)
    meshes = manifest.load_meshes()
    result = train(segments, meshes, config, args.out)
    print(f"trained on {len(segments)} segments; final loss {result.final_loss:.3f}")
    print(f"checkpoints: {', '.join(os.path.basename(p) for p in result.checkpoint_paths)}")
    return 0


def _cmd_eval(args) -> int:
    manifest = load_dataset(os.path.join(args.data, "manifest.json"))
    report = eval_checkpoint(
        args.ckpt,
        manifest,
        samples=args.samples,
        horizon_steps=args.horizon,
        conditions_mode=args.conditions,
        strategy=args.strategy,
        seed=args.seed,
        max_segments=args.max_segments,
    )
    metrics_mod.write_report(report, args.report, text_path=os.path.splitext(args.report)[0] + ".txt")
    print(report["table"])
    return 0


def _cmd_rollout(args) -> int:
    torch.set_num_threads(1)
    from .data import initialize_agents

    bundle = MapBundle.load(args.map)
    policy, _ = load_checkpoint(args.ckpt)
    policy.eval()
    conditions: Dict[str, AgentConditions] = {}
    if args.conditions:
        with open(args.conditions) as handle:
            conditions = conditions_file_to_map(json.load(handle))
    states, geoms, agent_ids = initialize_agents(bundle, args.agents, args.seed)
    config = RolloutConfig(
        mode="autonomous",
        horizon=args.horizon,
        seed=args.seed,
        stop_on_ego_infraction=args.stop_on_infraction,
    )
    record = rollout(states, geoms, agent_ids, bundle.mesh, policy, conditions, config)
    with open(args.out, "w") as handle:
        handle.write(record_to_jsonl(record, conditions))
    print(f"rollout of {record.steps_run} steps, {len(record.reach_events)} reach events, "
          f"{len(record.infraction_events)} infraction events -> {args.out}")
    return 0


def _cmd_render(args) -> int:
    with open(args.segment) as handle:
        lines = [line for line in handle if line.strip()]
    if not 0 <= args.scene < len(lines):
        raise ValueError(f"scene index {args.scene} out of range ({len(lines)} scenes)")
    segment = scene_to_segment(json.loads(lines[args.scene]))
    mesh = MapMesh.load(args.map) if args.map else MapMesh(triangles=np.zeros((0, 3, 2)))
    if not 0 <= args.t < segment.num_steps:
        raise ValueError(f"timestep {args.t} out of range ({segment.num_steps} steps)")
    raster = render(
        args.ego,
        segment.states[args.t],
        segment.geometries,
        mesh,
        light_phases=mesh.light_phases(args.t * segment.dt),
    )
    save_png(raster, args.out, scale=args.scale)
    print(f"wrote {args.out}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    checkpoints = {}
    for path in args.ckpt:
        name = os.path.splitext(os.path.basename(path))[0]
        checkpoints[name] = path
    app = create_app(args.maps, checkpoints)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steersim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="build a synthetic dataset")
    p.add_argument("--config", help="SyntheticConfig JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("train", help="train a policy on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stride", type=int, default=10, help="window stride in steps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="classmates-forcing evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=6)
    p.add_argument("--horizon", type=int, default=40,
                   help="window length in steps (40 = 4 s, 80 = 8 s)")
    p.add_argument("--conditions", choices=CONDITION_CHOICES, default="w+ts")
    p.add_argument("--strategy", choices=STRATEGY_CHOICES, default="sampled")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-segments", type=int, default=200)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("rollout", help="autonomous rollout on a map with a conditions file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--conditions", help="conditions JSON file")
    p.add_argument("--agents", type=int, default=4)
    p.add_argument("--horizon", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stop-on-infraction", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rollout)

    p = sub.add_parser("render", help="export a birdview PNG from a trajectory log")
    p.add_argument("--segment", required=True, help="trajectory log (JSON lines)")
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--ego", type=int, required=True)
    p.add_argument("--map", help="map JSON for the drivable layer")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("serve", help="run the live steering service")
    p.add_argument("--ckpt", required=True, nargs="+", help="checkpoint file(s)")
    p.add_argument("--maps", required=True, help="directory of map JSON files")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8700)
    p.set_defaults(func=_cmd_serve)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Dispatch a CLI invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_err:
        return int(exit_err.code or 0)
    try:
        return args.func(args)
    except Exception as err:  # noqa: BLE001 - CLI boundary turns failures into exit 1
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
