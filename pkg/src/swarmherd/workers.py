"""Worker control law and the mode/lock state machine.

A worker's control input is ``u = alpha*w + beta*g`` plus an emergency
separation term:

* ``w`` — formation term: mean over the formation set of
  ``phi(d_ij - target_ij)`` applied along the self-minus-neighbor direction,
  so too-far neighbors attract and too-close neighbors repel;
* ``g`` — guide-reaction term: mean over guides within the reactive field of
  view of ``phi_plus(d_ij - d_rho)`` along the same direction, i.e. pure
  repulsion away from nearby guides;
* emergency term: an unconditional linear push away from any worker inside
  EMERGENCY_RADIUS, covering pairs the formation set cannot see.

In Loose mode the formation set is whatever currently sits inside the field
of view and the target is d_rho everywhere. Shape and Rigid modes instead use
a FormationLock: the neighbor set and distances snapshotted at the moment of
transition. Shape drops locked links stretched beyond the field of view
(guides can carve the cluster); Rigid only drops links beyond communication
range, which is what makes transport edge-consistent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

from swarmherd.geometry import NeighborRecord, NeighborSets, RobotId, RobotState, Vec2
from swarmherd.potential import PotentialParams, phi, phi_plus


class WorkerMode(enum.IntEnum):
    """Wire values are fixed: they travel in the "w.mode" stigmergy key."""

    LOOSE = 0
    SHAPE = 1
    RIGID = 2


# Emergency separation band. Healthy spacings never get near it: the loose
# equilibrium is d_rho = 0.8 and lock targets snapshot distances well above
# 0.4. It only fires between unlinked workers ground together during long
# rigid transports, where no formation term would push back.
EMERGENCY_RADIUS = 0.35
EMERGENCY_GAIN = 4.0


@dataclass(frozen=True)
class WorkerParams:
    rho: float = 0.8
    fov: float = 1.0
    rfov: float = 0.7
    mode: WorkerMode = WorkerMode.LOOSE

    def __post_init__(self) -> None:
        if not 0.0 < self.rho < self.fov:
            raise ValueError(f"need 0 < d_rho < d_fov, got rho={self.rho}, fov={self.fov}")
        if not self.rfov > 0.0:
            raise ValueError(f"d_rfov must be positive, got {self.rfov}")


@dataclass(frozen=True)
class WorkerGains:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self) -> None:
        if not (self.alpha > 0.0 and self.beta > 0.0):
            raise ValueError("gains must be positive")


@dataclass
class FormationLock:
    """Snapshot of the formation graph taken at a mode transition."""

    lookup_ids: set[RobotId] = field(default_factory=set)
    lookup_distances: dict[RobotId, float] = field(default_factory=dict)
    locked_at_tick: int = 0


def _accumulate(
    records: list[tuple[NeighborRecord, float]],
    params: PotentialParams,
    repulsive_only: bool,
) -> tuple[float, float]:
    """Mean force over (record, target) pairs, along self minus neighbor.

    relative_position points from self to the neighbor, so the force
    direction x_i - x_j is its negation. Terms are summed in the caller's
    order, then averaged; this order is part of the determinism contract.
    """
    if not records:
        return 0.0, 0.0
    f = phi_plus if repulsive_only else phi
    sx = 0.0
    sy = 0.0
    for rec, target in records:
        val = f(rec.distance - target, params)
        dx = -rec.relative_position.x
        dy = -rec.relative_position.y
        sx += val * dx / rec.distance
        sy += val * dy / rec.distance
    n = len(records)
    return sx / n, sy / n


def worker_control(
    self_state: RobotState,
    neighbors: NeighborSets,
    params: WorkerParams,
    gains: WorkerGains,
    lock: FormationLock | None = None,
    potential: PotentialParams = PotentialParams(),
    shape_uses_lock_distances: bool = True,
) -> Vec2:
    """Control input u_i for one worker given its frozen neighbor snapshot.

    Either term is the zero vector when its neighbor set is empty. The
    ``shape_uses_lock_distances`` flag selects whether Shape/Rigid modes aim
    for the snapshotted distances (default) or fall back to d_rho. On top of
    the two potential terms, any worker inside the emergency band adds an
    unconditional push-apart regardless of mode or lock membership.
    """
    if params.mode is WorkerMode.LOOSE:
        formation = [(rec, params.rho) for rec in neighbors.fov]
    else:
        if lock is None:
            formation = []
        elif shape_uses_lock_distances:
            formation = [
                (rec, lock.lookup_distances[rec.id])
                for rec in neighbors.all
                if rec.id in lock.lookup_ids
            ]
        else:
            formation = [(rec, params.rho) for rec in neighbors.all if rec.id in lock.lookup_ids]

    wx, wy = _accumulate(formation, potential, repulsive_only=False)
    gx, gy = _accumulate([(rec, params.rho) for rec in neighbors.rfov], potential, repulsive_only=True)
    ex = 0.0
    ey = 0.0
    for rec in neighbors.workers:
        if 0.0 < rec.distance < EMERGENCY_RADIUS:
            val = EMERGENCY_GAIN * (EMERGENCY_RADIUS - rec.distance) / EMERGENCY_RADIUS
            ex += val * -rec.relative_position.x / rec.distance
            ey += val * -rec.relative_position.y / rec.distance
    return Vec2(
        gains.alpha * wx + gains.beta * gx + ex,
        gains.alpha * wy + gains.beta * gy + ey,
    )


def transition_mode(
    current: WorkerParams,
    new_mode: WorkerMode,
    neighbors: NeighborSets,
    lock: FormationLock | None = None,
    tick: int = 0,
) -> tuple[WorkerParams, FormationLock | None]:
    """Apply a mode change, snapshotting or discarding the formation lock.

    Re-entering the current mode is a no-op (the lock is kept as-is).
    Entering Shape or Rigid snapshots the current field-of-view neighbors
    with their current distances; entering Loose discards the lock.
    """
    if new_mode is current.mode:
        return current, lock
    params = replace(current, mode=new_mode)
    if new_mode is WorkerMode.LOOSE:
        return params, None
    snapshot = FormationLock(
        lookup_ids={rec.id for rec in neighbors.fov},
        lookup_distances={rec.id: rec.distance for rec in neighbors.fov},
        locked_at_tick=tick,
    )
    return params, snapshot


def prune_lock(
    lock: FormationLock,
    neighbors: NeighborSets,
    params: WorkerParams,
    d_com: float,
) -> FormationLock:
    """Drop locked links per the current mode's breakage rule.

    Shape mode breaks links stretched beyond the field of view; Rigid mode
    breaks them only at communication range (the distance becomes
    unmeasurable). A neighbor absent from the snapshot entirely is out of
    communication range and is dropped in both modes. Entries never re-enter.
    """
    if params.mode is WorkerMode.LOOSE:
        return lock
    current = {rec.id: rec.distance for rec in neighbors.all}
    kept_ids: set[RobotId] = set()
    kept_dist: dict[RobotId, float] = {}
    for rid in lock.lookup_ids:
        d = current.get(rid)
        if d is None:
            continue
        if params.mode is WorkerMode.SHAPE and d > params.fov:
            continue
        if params.mode is WorkerMode.RIGID and d >= d_com:
            continue
        kept_ids.add(rid)
        kept_dist[rid] = lock.lookup_distances[rid]
    return FormationLock(
        lookup_ids=kept_ids,
        lookup_distances=kept_dist,
        locked_at_tick=lock.locked_at_tick,
    )
