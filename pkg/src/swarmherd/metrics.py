"""Run analysis: deformation metric, state timing, safety audits.

Everything here is a pure function over a finished (or synthetic) WorldLog,
so the same audits run on engine output and on hand-built fixtures.

The distortion metric sums absolute pairwise distance changes between the
snapshot at transport start and the final snapshot, as an ordered double sum
over robots divided by the robot count. Absolute values are deliberate: a
signed sum lets an expanded pair cancel a contracted one and report zero
deformation. The signed variant stays available behind a flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from swarmherd.engine import WorldLog
from swarmherd.potential import PotentialParams, potential_energy
from swarmherd.workers import WorkerParams


@dataclass(frozen=True)
class MetricsReport:
    distortion_raw: float | None
    distortion_normalized: float | None
    state_durations: dict
    min_pairwise_distance: float
    max_rigid_edge_error: float | None
    collision_events: int
    energy_trace: tuple[float, ...] | None = None

    def to_text(self) -> str:
        lines = ["metrics report", "=" * 14]
        lines.append(f"distortion_raw: {_fmt(self.distortion_raw)}")
        lines.append(f"distortion_normalized: {_fmt(self.distortion_normalized)}")
        for state, ticks in self.state_durations.items():
            lines.append(f"duration[{state}]: {ticks}")
        lines.append(f"min_pairwise_distance: {_fmt(self.min_pairwise_distance)}")
        lines.append(f"max_rigid_edge_error: {_fmt(self.max_rigid_edge_error)}")
        lines.append(f"collision_events: {self.collision_events}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return f"{v:.9g}" if isinstance(v, float) else str(v)


def distortion(
    positions_at_shaping: Mapping[int, tuple[float, float]],
    positions_at_final: Mapping[int, tuple[float, float]],
    worker_ids: Iterable[int] | None = None,
    signed: bool = False,
) -> float:
    """Mean pairwise distance change between the two snapshots.

    Ordered double sum over distinct robots, divided by the robot count, so
    every unordered pair is counted twice; hand evaluations of the formula
    match verbatim. A value of 0 means perfectly preserved shape.
    """
    ids = sorted(worker_ids) if worker_ids is not None else sorted(positions_at_shaping)
    missing_s = [i for i in ids if i not in positions_at_shaping]
    missing_f = [i for i in ids if i not in positions_at_final]
    if missing_s or missing_f:
        raise ValueError(f"snapshots do not cover the same ids (missing {missing_s + missing_f})")
    if worker_ids is None and set(positions_at_final) != set(ids):
        raise ValueError("snapshots cover different id sets")
    n = len(ids)
    if n < 2:
        raise ValueError("distortion needs at least two robots")
    a = np.array([positions_at_shaping[i] for i in ids], dtype=np.float64)
    b = np.array([positions_at_final[i] for i in ids], dtype=np.float64)
    da = np.sqrt(((a[:, None, :] - a[None, :, :]) ** 2).sum(axis=2))
    db = np.sqrt(((b[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    diff = da - db if signed else np.abs(da - db)
    np.fill_diagonal(diff, 0.0)
    return float(diff.sum()) / n


def snapshot_to_mapping(positions: np.ndarray, ids: Iterable[int]) -> dict[int, tuple[float, float]]:
    """Index a position array by robot id for the distortion interface."""
    return {int(i): (float(positions[i, 0]), float(positions[i, 1])) for i in ids}


def normalize_distortions(batch: list[float]) -> list[float]:
    """Divide by the batch maximum; an all-zero batch stays all zeros."""
    if not batch:
        raise ValueError("cannot normalize an empty batch")
    top = max(batch)
    if top == 0.0:
        return [0.0 for _ in batch]
    return [v / top for v in batch]


def audit_collisions(log: WorldLog, robot_radius: float) -> tuple[float, int]:
    """(global minimum pairwise distance, count of ticks with a pair < 2r).

    Works off the per-tick minimum-distance series the engine records every
    tick. An empty log reports (inf, 0).
    """
    if not log.min_pair_distance:
        return math.inf, 0
    lo = min(log.min_pair_distance)
    threshold = 2.0 * robot_radius
    events = sum(1 for d in log.min_pair_distance if d < threshold)
    return lo, events


def audit_rigid_edges(
    log: WorldLog,
    locks: Mapping[tuple[int, int], float] | None = None,
) -> float | None:
    """Worst |current - locked| edge length over the Movement interval.

    With ``locks`` given (a {(i, j): locked_distance} table) the distances
    are recomputed from the trajectory samples; otherwise the engine's
    per-tick series is used. Returns None when the run never reached
    Movement (not applicable).
    """
    start = log.movement_start_tick
    if start is None:
        return None
    if locks is not None:
        by_tick: dict[int, dict[int, tuple[float, float]]] = {}
        for tick, rid, _role, x, y, _state in log.trajectory:
            if tick >= start:
                by_tick.setdefault(tick, {})[rid] = (x, y)
        worst = 0.0
        for frame in by_tick.values():
            for (i, j), target in locks.items():
                if i in frame and j in frame:
                    d = math.hypot(frame[i][0] - frame[j][0], frame[i][1] - frame[j][1])
                    worst = max(worst, abs(d - target))
        return worst
    errors = [e for e in log.rigid_edge_error[start:] if not math.isnan(e)]
    if not errors:
        return None
    return max(errors)


def state_durations(log: WorldLog) -> dict[str, int]:
    """Ticks spent in each guide FSM state, team-level.

    A state's duration runs from the previous barrier release (or tick 0) to
    its own release; Movement runs from its release to the last terminal
    event and is absent if the run never finished.
    """
    releases: dict[str, int] = {}
    last_terminal: int | None = None
    for ev in log.events:
        if ev.kind == "barrier_release" and ev.detail not in releases:
            releases[ev.detail] = ev.tick
        elif ev.kind == "terminal":
            last_terminal = ev.tick if last_terminal is None else max(last_terminal, ev.tick)
    durations: dict[str, int] = {}
    prev = 0
    for state in ("task_allocation", "shaping_setup", "shaping"):
        if state not in releases:
            break
        durations[state] = releases[state] - prev
        prev = releases[state]
    if "shaping" in durations and last_terminal is not None:
        durations["movement"] = last_terminal - releases["shaping"]
    return durations


def energy_series(
    log: WorldLog,
    worker_params: WorkerParams = WorkerParams(),
    potential: PotentialParams = PotentialParams(),
) -> list[float]:
    """Total formation potential per logged tick, for relaxation audits.

    Sums the pair well, evaluated by numerical integration of phi (so the
    audit does not share algebra with the closed forms), over every worker
    pair within the field of view. Only meaningful for runs logged with
    log_every = 1 and stable neighbor sets.
    """
    frames: dict[int, list[tuple[float, float]]] = {}
    for tick, _rid, role, x, y, _state in log.trajectory:
        if role == "worker":
            frames.setdefault(tick, []).append((x, y))
    series: list[float] = []
    for tick in sorted(frames):
        pts = frames[tick]
        total = 0.0
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                d = math.hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1])
                if d <= worker_params.fov:
                    # pair well U(d) = integral of phi from d - rho up to 0
                    total += potential_energy(d - worker_params.rho, 0.0, potential)
        series.append(total)
    return series


def build_report(
    log: WorldLog,
    n_workers: int,
    robot_radius: float,
    distortion_normalized: float | None = None,
    include_energy: bool = False,
    worker_params: WorkerParams = WorkerParams(),
    potential: PotentialParams = PotentialParams(),
) -> MetricsReport:
    """Assemble the standard per-run report from a finished log."""
    raw: float | None = None
    if (
        log.movement_start_positions is not None
        and log.final_positions is not None
        and n_workers >= 2
    ):
        ids = range(n_workers)
        raw = distortion(
            snapshot_to_mapping(log.movement_start_positions, ids),
            snapshot_to_mapping(log.final_positions, ids),
        )
    min_dist, events = audit_collisions(log, robot_radius)
    trace = tuple(energy_series(log, worker_params, potential)) if include_energy else None
    return MetricsReport(
        distortion_raw=raw,
        distortion_normalized=distortion_normalized,
        state_durations=state_durations(log),
        min_pairwise_distance=min_dist,
        max_rigid_edge_error=audit_rigid_edges(log),
        collision_events=events,
        energy_trace=trace,
    )
