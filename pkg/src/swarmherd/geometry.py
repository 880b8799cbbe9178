"""Planar vector math, robot identity, and neighbor-set abstractions.

Conventions used throughout the package:

* angles are radians in (-pi, pi], counter-clockwise positive;
* ``perpendicular`` rotates +90 degrees (counter-clockwise) — this fixes the
  edge-following direction to clockwise around the cluster;
* a ``NeighborRecord.relative_position`` points from the observing robot to
  the neighbor (what an onboard sensor reports);
* a center-of-mass ``offset`` therefore points from the robot to the
  perceived COM.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field


class Role(enum.Enum):
    WORKER = "worker"
    GUIDE = "guide"


@dataclass(frozen=True, order=True)
class RobotId:
    """Unique swarm-wide identity. Role is fixed for the lifetime of a run."""

    id: int
    role: Role = field(compare=False, default=Role.WORKER)

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError(f"robot id must be non-negative, got {self.id}")


@dataclass(frozen=True)
class Vec2:
    x: float
    y: float

    def __add__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x - other.x, self.y - other.y)

    def __mul__(self, scalar: float) -> "Vec2":
        return Vec2(self.x * scalar, self.y * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "Vec2":
        return Vec2(-self.x, -self.y)

    def dot(self, other: "Vec2") -> float:
        return self.x * other.x + self.y * other.y

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def normalized(self) -> "Vec2":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize a zero vector")
        return Vec2(self.x / n, self.y / n)

    def is_finite(self) -> bool:
        return math.isfinite(self.x) and math.isfinite(self.y)


ZERO = Vec2(0.0, 0.0)


def angle_of(v: Vec2) -> float:
    """Angle of a non-zero vector in (-pi, pi].

    atan2 returns -pi for vectors like (-1, -0.0); fold that onto +pi so the
    half-open interval convention holds.
    """
    if v.x == 0.0 and v.y == 0.0:
        raise ValueError("degenerate direction: zero vector has no angle")
    a = math.atan2(v.y, v.x)
    if a <= -math.pi:
        a = math.pi
    return a


def wrapped_angle_diff(a: float, b: float) -> float:
    """Signed difference a - b wrapped into (-pi, pi]."""
    d = math.fmod(a - b, 2.0 * math.pi)
    if d > math.pi:
        d -= 2.0 * math.pi
    elif d <= -math.pi:
        d += 2.0 * math.pi
    return d


def perpendicular(v: Vec2) -> Vec2:
    """v rotated +90 degrees. Preserves norm; orthogonal to v."""
    if v.x == 0.0 and v.y == 0.0:
        raise ValueError("degenerate direction: zero vector has no perpendicular")
    return Vec2(-v.y, v.x)


@dataclass(frozen=True)
class NeighborRecord:
    """One sensed neighbor: relative position, distance, bearing."""

    id: RobotId
    relative_position: Vec2
    distance: float
    bearing: float

    @classmethod
    def from_relative(cls, id: RobotId, relative_position: Vec2) -> "NeighborRecord":
        return cls(
            id=id,
            relative_position=relative_position,
            distance=relative_position.norm(),
            bearing=angle_of(relative_position),
        )


@dataclass(frozen=True)
class NeighborSets:
    """A robot's neighbor lists partitioned by role and filtered by range.

    ``fov`` holds workers within d_FoV (formation candidates); ``rfov`` holds
    guides within d_RFoV (repulsion sources). Both are subsets of the
    role-partitioned lists, which together cover ``all``.
    """

    all: tuple[NeighborRecord, ...]
    workers: tuple[NeighborRecord, ...]
    guides: tuple[NeighborRecord, ...]
    fov: tuple[NeighborRecord, ...]
    rfov: tuple[NeighborRecord, ...]


def build_neighbor_sets(
    records: list[NeighborRecord] | tuple[NeighborRecord, ...],
    d_fov: float,
    d_rfov: float,
) -> NeighborSets:
    """Partition records by role and apply the FoV / RFoV range filters.

    Records are ordered by neighbor id in every list so downstream sums are
    evaluated in one documented order.
    """
    ordered = tuple(sorted(records, key=lambda r: r.id.id))
    workers = tuple(r for r in ordered if r.id.role is Role.WORKER)
    guides = tuple(r for r in ordered if r.id.role is Role.GUIDE)
    fov = tuple(r for r in workers if r.distance <= d_fov)
    rfov = tuple(r for r in guides if r.distance <= d_rfov)
    return NeighborSets(all=ordered, workers=workers, guides=guides, fov=fov, rfov=rfov)


@dataclass
class RobotState:
    """Per-robot runtime record handed to controllers.

    ``mode`` is the worker-mode wire value (0 loose, 1 shape, 2 rigid; see
    workers.WorkerMode); ``fsm`` is the guide FSM tag, empty for workers.
    """

    rid: RobotId
    position: Vec2
    velocity: Vec2 = ZERO
    control: Vec2 = ZERO
    mode: int = 0
    fsm: str = ""


@dataclass(frozen=True)
class CenterOfMassEstimate:
    """Local worker-COM estimate; flagged undefined when no workers are seen."""

    offset: Vec2 | None
    count: int

    @property
    def defined(self) -> bool:
        return self.count > 0


def center_of_mass(records: list[NeighborRecord] | tuple[NeighborRecord, ...]) -> CenterOfMassEstimate:
    """Mean of worker-neighbor relative positions.

    An empty list yields the flagged-undefined estimate rather than (0, 0) so
    callers can fall back to search behavior.
    """
    if not records:
        return CenterOfMassEstimate(offset=None, count=0)
    sx = 0.0
    sy = 0.0
    for rec in records:
        sx += rec.relative_position.x
        sy += rec.relative_position.y
    n = len(records)
    return CenterOfMassEstimate(offset=Vec2(sx / n, sy / n), count=n)
