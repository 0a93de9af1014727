"""Displacement, diversity, infraction, and condition-reach metrics.

Displacement metrics compare K sampled ego tracks against ground truth
on position only. Reach and infraction rates aggregate rollout records
per episode; an episode counts as reaching a condition kind when the
first entry of its assigned list was satisfied, and per-condition counts
are also reported so other bases can be recomputed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .conditioning import AgentConditions, ReachParams

MISS_THRESHOLD = 2.0  # m; a miss requires strictly exceeding this

REPORT_COLUMNS = (
    "ade", "min_ade", "fde", "min_fde", "miss_rate", "mfd",
    "collision_rate", "waypoint_reach_rate", "target_speed_reach_rate",
)
COLUMN_TITLES = {
    "ade": "ADE",
    "min_ade": "minADE",
    "fde": "FDE",
    "min_fde": "minFDE",
    "miss_rate": "Miss Rate",
    "mfd": "MFD",
    "collision_rate": "Collision Rate",
    "waypoint_reach_rate": "Waypoint Reach Rate",
    "target_speed_reach_rate": "Target Speed Reach Rate",
}


def displacement_metrics(samples, ground_truth) -> dict:
    """ADE/FDE (mean over K samples), best-of-K variants, miss flags, MFD.

    `samples` is (K, T, 2) predicted ego positions, `ground_truth` (T, 2).
    """
    samples = np.asarray(samples, dtype=float)
    ground_truth = np.asarray(ground_truth, dtype=float)
    if samples.ndim != 3 or samples.shape[2] != 2:
        raise ValueError(f"samples must be (K, T, 2), got {samples.shape}")
    if ground_truth.shape != samples.shape[1:]:
        raise ValueError(
            f"ground truth shape {ground_truth.shape} does not match samples {samples.shape[1:]}"
        )
    errors = np.linalg.norm(samples - ground_truth[None], axis=2)  # (K, T)
    per_sample_ade = errors.mean(axis=1)
    per_sample_fde = errors[:, -1]
    miss_flags = (errors > MISS_THRESHOLD).any(axis=1)

    finals = samples[:, -1, :]
    mfd = 0.0
    for i in range(len(finals)):
        for j in range(i + 1, len(finals)):
            mfd = max(mfd, float(np.linalg.norm(finals[i] - finals[j])))

    return {
        "ade": float(per_sample_ade.mean()),
        "fde": float(per_sample_fde.mean()),
        "min_ade": float(per_sample_ade.min()),
        "min_fde": float(per_sample_fde.min()),
        "miss_flags": [bool(f) for f in miss_flags],
        "miss_rate": float(miss_flags.mean()),
        "mfd": mfd,
    }


@dataclass(frozen=True)
class EpisodeOutcome:
    """Per-episode evidence the rate aggregator consumes."""

    agent_id: str
    had_waypoints: bool
    had_target_speeds: bool
    first_waypoint_reached: bool
    first_target_speed_reached: bool
    waypoints_reached: int
    target_speeds_reached: int
    ego_collision: bool
    ego_offroad: bool
    ego_red_light: bool
    episode_length: int


def episode_outcome(record, ego_id: str, conditions: AgentConditions, reach_events=None) -> EpisodeOutcome:
    """Summarize one rollout record from the ego's perspective.

    `reach_events` overrides the record's own event log, e.g. when reach
    is measured against conditions the policy never saw.
    """
    source = record.reach_events if reach_events is None else reach_events
    ego_reaches = [e for e in source if e.agent_id == ego_id]
    waypoint_hits = [e for e in ego_reaches if e.kind == "waypoint"]
    speed_hits = [e for e in ego_reaches if e.kind == "target_speed"]
    ego_infractions = {
        kind: any(e.kind == kind and ego_id in e.agents for e in record.infraction_events)
        for kind in ("collision", "offroad", "red_light")
    }
    return EpisodeOutcome(
        agent_id=ego_id,
        had_waypoints=len(conditions.waypoints) > 0,
        had_target_speeds=len(conditions.target_speeds) > 0,
        first_waypoint_reached=any(e.index == 0 for e in waypoint_hits),
        first_target_speed_reached=any(e.index == 0 for e in speed_hits),
        waypoints_reached=len(waypoint_hits),
        target_speeds_reached=len(speed_hits),
        ego_collision=ego_infractions["collision"],
        ego_offroad=ego_infractions["offroad"],
        ego_red_light=ego_infractions["red_light"],
        episode_length=record.steps_run,
    )


def reach_and_infraction_rates(outcomes: Sequence[EpisodeOutcome]) -> dict:
    """Aggregate episode outcomes into the reach/infraction rate table.

    Reach rates with an empty denominator (no episode carried that
    condition kind) are reported as None rather than a silent zero.
    """
    total = len(outcomes)
    if total == 0:
        raise ValueError("no episodes to aggregate")
    with_waypoints = [o for o in outcomes if o.had_waypoints]
    with_speeds = [o for o in outcomes if o.had_target_speeds]

    def rate(flags) -> float:
        return float(np.mean([bool(f) for f in flags]))

    return {
        "episodes": total,
        "waypoint_reach_rate": rate([o.first_waypoint_reached for o in with_waypoints]) if with_waypoints else None,
        "target_speed_reach_rate": rate([o.first_target_speed_reached for o in with_speeds]) if with_speeds else None,
        "collision_rate": rate([o.ego_collision for o in outcomes]),
        "offroad_rate": rate([o.ego_offroad for o in outcomes]),
        "red_light_rate": rate([o.ego_red_light for o in outcomes]),
        "avg_waypoints_reached": float(np.mean([o.waypoints_reached for o in outcomes])),
        "avg_episode_length": float(np.mean([o.episode_length for o in outcomes])),
        "waypoint_episodes": len(with_waypoints),
        "target_speed_episodes": len(with_speeds),
        "total_waypoints_reached": int(sum(o.waypoints_reached for o in outcomes)),
        "total_target_speeds_reached": int(sum(o.target_speeds_reached for o in outcomes)),
    }


def speed_histogram(speeds, bin_width: float = 1.0) -> dict:
    """Histogram of speed values with fixed-width bins starting at zero."""
    speeds = np.asarray(speeds, dtype=float).ravel()
    if speeds.size == 0:
        return {"bin_width": bin_width, "counts": [], "bin_edges": []}
    top = math.floor(float(speeds.max()) / bin_width) + 1
    edges = np.arange(0.0, (top + 1) * bin_width, bin_width)
    counts, _ = np.histogram(speeds, bins=edges)
    return {
        "bin_width": bin_width,
        "counts": [int(c) for c in counts],
        "bin_edges": [float(e) for e in edges],
    }


def build_report(groups: Dict[str, dict], speeds=None) -> dict:
    """Combine per-group metric dicts into one report document.

    `groups` maps a label like "model/conditions" to a dict that may hold
    displacement metrics, rate metrics, or both. The report carries a
    machine-readable body plus an aligned text table in Table-1 column
    order.
    """
    rows = {}
    for label, metrics in groups.items():
        rows[label] = {key: metrics.get(key) for key in REPORT_COLUMNS}
        extras = {k: v for k, v in metrics.items() if k not in REPORT_COLUMNS}
        rows[label]["extra"] = extras
    report = {
        "schema_version": 1,
        "columns": list(REPORT_COLUMNS),
        "groups": rows,
    }
    if speeds is not None:
        report["speed_histogram"] = speed_histogram(speeds)
    report["table"] = format_table(rows)
    return report


def format_table(rows: Dict[str, dict]) -> str:
    header = ["Group"] + [COLUMN_TITLES[c] for c in REPORT_COLUMNS]
    body = []
    for label in rows:
        cells = [label]
        for column in REPORT_COLUMNS:
            value = rows[label].get(column)
            cells.append("-" if value is None else f"{value:.3f}")
        body.append(cells)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in [header] + body]
    return "\n".join(lines)


def write_report(report: dict, json_path: str, text_path: Optional[str] = None) -> None:
    with open(json_path, "w") as handle:
        json.dump(report, handle, indent=1, sort_keys=True)
    if text_path is not None:
        with open(text_path, "w") as handle:
            handle.write(report["table"] + "\n")
