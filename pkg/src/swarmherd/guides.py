"""Guide controllers: edge following, station setup, shaping, and transport.

A guide's mission is a fixed pipeline. First the team agrees who takes which
station around the worker cluster (task allocation). Each guide then travels
to its station along the cluster edge (shaping setup), presses inward to
deform the cluster (shaping), and finally escorts the deformed cluster
through a waypoint list (movement). Phase changes that must be simultaneous
across the team are gated by stigmergy barriers, and the worker-facing
control parameters are pushed over the same stigmergy keys on phase entry.

Conventions: all angles are absolute world bearings except the movement-phase
station bearing, which is measured relative to the COM-to-waypoint axis so
the formation turns with the direction of travel. ``offset`` always points
from the guide toward the perceived worker COM.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from swarmherd.allocation import (
    AllocationDigest,
    AllocationState,
    allocation_done,
    compute_costs,
    consensus_round,
)
from swarmherd.comms import (
    KEY_FOV,
    KEY_MODE,
    KEY_RFOV,
    KEY_RHO,
    StigmergyStore,
    barrier_check,
    barrier_post,
    bearing_key,
    gcom_key,
    stigmergy_put,
)
from swarmherd.geometry import (
    ZERO,
    NeighborSets,
    RobotId,
    RobotState,
    Vec2,
    angle_of,
    center_of_mass,
    perpendicular,
    wrapped_angle_diff,
)
from swarmherd.potential import PotentialParams, phi, phi_plus
from swarmherd.workers import WorkerMode, WorkerParams

STATE_TASK_ALLOCATION = "task_allocation"
STATE_SHAPING_SETUP = "shaping_setup"
STATE_SHAPING = "shaping"
STATE_MOVEMENT = "movement"
STATE_TERMINAL = "terminal"

SUB_SEPARATE = "separate"
SUB_EDGE_FOLLOW = "edge_follow"
SUB_RADIAL_APPROACH = "radial_approach"

# Angular half-width of the cone, about the current heading, inside which a
# peer guide has right of way during edge following.
YIELD_CONE = math.pi / 4

# Consecutive yielded ticks before a blocking guide is presumed parked at its
# station and overtaken. Without this, the first guide to finish setup walls
# off the boundary ring for everyone still walking behind it.
YIELD_PATIENCE = 100

# While edge following, peer guides closer than PASS_CLEARANCE bend the move
# vector away; the overtake after YIELD_PATIENCE would otherwise walk right
# through the parked guide it is passing. The gain is sized against the
# roughly unit-length edge-follow move.
PASS_CLEARANCE = 0.5
PASS_GAIN = 3.0

# Distance (rad) over which edge-following speed tapers as the station
# bearing comes into reach; keeps the per-tick angular step well under the
# arrival window.
EDGE_TAPER = 0.2

# Concave bays in a ragged cluster rim pull an edge-follower inward until it
# orbits an interior pocket. Blend outward drift in as the local COM offset
# sags below exit_offset, at full strength once the sag exceeds this band,
# so the follower rides an inflated contour across bay mouths.
EDGE_SAG_BAND = 0.3

# Guides declare arrival when the fused COM estimate is within this fraction
# of arrival_tol, budgeting the rest for estimation bias: each guide's
# perceived COM leans toward its own side of the cluster, and averaging a
# handful of stations cancels that only approximately.
ARRIVAL_MARGIN = 0.85

# Shared COM estimates snap to this grid before hitting stigmergy, so the
# key only changes (and re-floods the swarm) after real movement rather than
# on every estimator jitter.
GCOM_GRID = 0.25

# Station error (rad) beyond which the circulation term runs at full gain.
# Inside the band it tapers linearly through zero, so a guide settles on its
# station instead of chattering across it at the full tangential speed.
STATION_TAPER = 0.2

# Bearing deadband while holding station at a barrier. Looser than the setup
# arrival tolerance: the perceived COM jumps whenever a worker crosses the
# sensing boundary, and the hold should not chase every jump.
HOLD_THETA_TOL = 0.05

# Press-release sync before the rigid snapshot: every guide backs its
# closest-worker gap off to the transport standoff (within this tolerance)
# and posts to this barrier tag; the mode wave only fires once all have.
TAG_SHAPING_RELEASE = "shaping_release"
RELEASE_GAP_TOL = 0.05

# Speed cap on the transport gap servo. Fast enough to track the drifting
# cluster and close the initial press, slow enough that a guide crossing a
# boundary dent cannot spike the local flee force in a single tick. Retreat
# is capped separately at the engine speed limit: when a sweep or a shell
# bump shoves a worker inside the target gap, backing off slowly is what
# turns a brush into a crush.
MOVE_PRESS_SPEED = 0.15

# Within this range of the current waypoint the station axis freezes at its
# last heading. The axis is the direction from the fused COM to the
# waypoint, and as that distance shrinks the quantized COM estimate flips
# the heading tick to tick; stations defined against a spinning axis drag
# the pressing guides around the rim through the very workers they push.
AXIS_FREEZE_RANGE = 2.0

# Escaping guides call themselves out only once no worker sits within this
# range in the heading half-plane; past the last shell worker this still
# leaves the boundary within edge-follow reach behind them.
ESCAPE_CLEAR_RANGE = 1.2


@dataclass(frozen=True)
class ShapingPlan:
    """Station geometry and tolerances for the setup and shaping phases.

    theta_targets / dist_targets are per-station: absolute bearing about the
    worker COM and the COM distance at which setup parks the guide. d_sp is
    the press-in COM distance for the shaping phase; a tuple gives one depth
    per station (a scalar presses every guide equally, which can only thin
    the cluster uniformly). All COM distances here are perceived distances:
    the guide's finite field of view biases its COM estimate toward the near
    edge, so these run shorter than true cluster radii.
    """

    theta_targets: tuple[float, ...]
    dist_targets: tuple[float, ...]
    d_sp: float | tuple[float, ...]
    d_ss: float = 1.0
    v_s: float = 0.05
    theta_tol: float = 0.01
    dist_tol: float = 0.45
    exit_offset: float = 1.1

    def __post_init__(self) -> None:
        if len(self.theta_targets) != len(self.dist_targets):
            raise ValueError("one setup distance is required per station bearing")
        if isinstance(self.d_sp, tuple) and len(self.d_sp) != len(self.theta_targets):
            raise ValueError("per-station press depths must cover every station")

    @property
    def n_tasks(self) -> int:
        return len(self.theta_targets)

    def press_depth(self, task: int) -> float:
        return self.d_sp[task] if isinstance(self.d_sp, tuple) else self.d_sp


@dataclass(frozen=True)
class MovementPlan:
    """Transport gains and the waypoint route.

    u = c + gamma_g * a, where c is a speed-capped proportional servo
    (gain beta_g) of the closest-visible-worker range onto a per-station
    target gap, and a circulates to hold the station bearing. Rear stations bite press_bias meters under
    com_standoff (scaled by how far astern they sit) and push the formation;
    front stations hold com_standoff itself, outside worker sensing range,
    and ride the advancing face. The waypoint term g only steers a guide
    that has lost every worker; while workers are visible the route enters
    through the station axis alone, so press depth never depends on how far
    away the waypoint happens to be.
    """

    waypoints: tuple[Vec2, ...]
    arrival_tol: float = 1.0
    alpha_g: float = 1.0
    beta_g: float = 1.0
    gamma_g: float = 1.0
    com_standoff: float = 1.05
    press_bias: float = 0.0

    def __post_init__(self) -> None:
        if not self.waypoints:
            raise ValueError("movement needs at least one waypoint")


@dataclass
class EdgeFollowState:
    """Bookkeeping for clockwise edge traversal.

    last_seen remembers the most recent distinct closest-worker ids so the
    guide keeps advancing along the boundary instead of orbiting one worker.
    """

    follow_distance: float = 0.95
    last_seen: deque = field(default_factory=lambda: deque(maxlen=10))
    current_neighbor: int | None = None
    old_neighbor: int | None = None
    heading: float | None = None
    last_com_dir: Vec2 | None = None
    yielded: bool = False
    lost_cluster: bool = False
    yield_ticks: int = 0
    ignored: set = field(default_factory=set)
    escape: Vec2 | None = None


def edge_follow_step(
    self_state: RobotState,
    neighbors: NeighborSets,
    efs: EdgeFollowState,
) -> tuple[Vec2, EdgeFollowState]:
    """One clockwise step along the cluster boundary.

    A peer guide inside the yield cone ahead freezes this guide for the tick
    (one of the two keeps moving, so convoys resolve). Otherwise steer
    perpendicular to the closest not-recently-seen worker while servoing the
    range to follow_distance. The returned move is unnormalized; callers
    scale it to their speed budget.
    """
    efs.yielded = False
    efs.lost_cluster = False
    visible = {rec.id.id for rec in neighbors.guides}
    efs.ignored &= visible
    if efs.heading is not None:
        blockers = [
            rec.id.id
            for rec in neighbors.guides
            if rec.id.id not in efs.ignored
            and abs(wrapped_angle_diff(rec.bearing, efs.heading)) < YIELD_CONE
        ]
        if blockers:
            efs.yield_ticks += 1
            if efs.yield_ticks <= YIELD_PATIENCE:
                efs.yielded = True
                return ZERO, efs
            # Blocker has not cleared the cone in a patience window; treat it
            # as parked and squeeze past rather than wait forever.
            efs.ignored.update(blockers)
        efs.yield_ticks = 0
    else:
        efs.yield_ticks = 0
    workers = neighbors.workers
    if not workers:
        efs.lost_cluster = True
        efs.current_neighbor = None
        if efs.last_com_dir is not None:
            return efs.last_com_dir, efs
        return ZERO, efs
    com = center_of_mass(workers)
    if com.defined and com.offset.norm() > 1e-12:
        efs.last_com_dir = com.offset.normalized()
    fresh = [rec for rec in workers if rec.id.id not in efs.last_seen]
    pool = fresh if fresh else list(workers)
    closest = min(pool, key=lambda rec: (rec.distance, rec.id.id))
    if closest.id.id != efs.current_neighbor:
        efs.old_neighbor = efs.current_neighbor
        efs.current_neighbor = closest.id.id
        efs.last_seen.append(closest.id.id)
    rel = closest.relative_position
    move = perpendicular(rel) + (closest.distance - efs.follow_distance) * rel
    for rec in neighbors.guides:
        if rec.id.id in efs.ignored and 1e-12 < rec.distance < PASS_CLEARANCE:
            away = (-1.0 / rec.distance) * rec.relative_position
            move = move + away * (PASS_GAIN * (PASS_CLEARANCE - rec.distance) / PASS_CLEARANCE)
    if move.norm() > 1e-12:
        efs.heading = angle_of(move)
    return move, efs


def _clockwise_to_go(bearing: float, target: float) -> float:
    """Angle still to sweep when travelling clockwise (bearing decreasing)."""
    return (bearing - target) % (2.0 * math.pi)


def station_hold_step(
    self_state: RobotState,
    neighbors: NeighborSets,
    theta_target: float,
    dist_target: float,
    theta_tol: float,
    dist_tol: float,
    speed: float,
) -> Vec2:
    """Servo back onto a station while waiting at a barrier.

    A guide that finished early cannot simply freeze: the loose cluster keeps
    relaxing and drifting under it, and by the time the stragglers post, the
    frozen position can sit at a completely different bearing about the COM
    than the station the team agreed on. Both errors use deadbands so a
    settled guide emits a zero command.
    """
    com = center_of_mass(neighbors.workers)
    if not com.defined:
        return ZERO
    radius = com.offset.norm()
    if radius < 1e-9:
        return ZERO
    cmd = ZERO
    err_r = radius - dist_target
    if abs(err_r) > dist_tol:
        step = max(-speed, min(speed, err_r - math.copysign(dist_tol, err_r)))
        cmd = cmd + com.offset.normalized() * step
    bearing = angle_of(-1.0 * com.offset)
    err_t = wrapped_angle_diff(bearing, theta_target)
    if abs(err_t) > theta_tol:
        arc = (err_t - math.copysign(theta_tol, err_t)) * radius
        step = max(-speed, min(speed, arc))
        cmd = cmd + perpendicular((-1.0 / radius) * com.offset) * (-step)
    return cmd


def closest_worker_gap(neighbors: NeighborSets) -> float | None:
    """Distance to the nearest visible worker, None with nothing in range."""
    if not neighbors.workers:
        return None
    return min(rec.distance for rec in neighbors.workers)


def press_release_step(
    self_state: RobotState,
    neighbors: NeighborSets,
    theta_target: float,
    standoff: float,
    theta_tol: float,
    gap_tol: float,
    speed: float,
) -> Vec2:
    """Back the press off to the transport standoff while barrier-waiting.

    The rigid snapshot freezes current distances as targets, so whatever
    dent depth the guides hold at the moment of release becomes the shape
    the web tries to keep. Transport presses much more gently than shaping;
    leaving the press at shaping depth bakes in an edge error the size of
    the depth difference. Servo the closest-worker gap out to the transport
    standoff and hold the station bearing so the snapshot matches what the
    movement controller will actually maintain.
    """
    com = center_of_mass(neighbors.workers)
    if not com.defined:
        return ZERO
    radius = com.offset.norm()
    if radius < 1e-9 or not neighbors.workers:
        return ZERO
    closest = min(neighbors.workers, key=lambda rec: (rec.distance, rec.id.id))
    cmd = ZERO
    err_r = closest.distance - standoff
    if abs(err_r) > gap_tol:
        step = max(-speed, min(speed, err_r - math.copysign(gap_tol, err_r)))
        cmd = cmd + com.offset.normalized() * step
    bearing = angle_of(-1.0 * com.offset)
    err_t = wrapped_angle_diff(bearing, theta_target)
    if abs(err_t) > theta_tol:
        arc = (err_t - math.copysign(theta_tol, err_t)) * radius
        step = max(-speed, min(speed, arc))
        cmd = cmd + perpendicular((-1.0 / radius) * com.offset) * (-step)
    return cmd


def shaping_setup_step(
    self_state: RobotState,
    neighbors: NeighborSets,
    plan: ShapingPlan,
    assigned_theta: float,
    assigned_dist: float,
    efs: EdgeFollowState,
    sub: str,
    potential: PotentialParams,
    setup_speed: float,
) -> tuple[Vec2, str, bool, bool]:
    """One tick of station setup; returns (command, sub', done, held).

    Three sub-phases run in order. separate: push away from any peer closer
    than d_ss while leaving the cluster interior. edge_follow: circle the
    boundary clockwise until the bearing about the COM is within theta_tol of
    the assigned station. radial_approach: move radially until the COM
    distance is within dist_tol of the assigned value. held reports a tick
    spent frozen because no worker is in range to define a COM.
    """
    com = center_of_mass(neighbors.workers)
    if not com.defined:
        return ZERO, sub, False, True

    if sub == SUB_SEPARATE:
        parts: list[Vec2] = []
        crowd = ZERO
        clear = True
        for rec in neighbors.guides:
            if rec.distance < plan.d_ss:
                clear = False
                away = phi_plus(rec.distance - plan.d_ss, potential)
                crowd = crowd + away * Vec2(
                    -rec.relative_position.x / rec.distance,
                    -rec.relative_position.y / rec.distance,
                )
        if crowd.norm() > 1e-12:
            parts.append(crowd.normalized())
        offset_mag = com.offset.norm()
        if efs.escape is None:
            outside = offset_mag >= plan.exit_offset
        else:
            # Mid-escape the offset test alone is not enough: an interior
            # density void skews the visible sample one-sided well before
            # the guide is actually out, and a guide released there orbits
            # the pocket forever. Keep plowing until nothing is left ahead.
            blocked = any(
                rec.distance < ESCAPE_CLEAR_RANGE
                and rec.relative_position.x * efs.escape.x
                + rec.relative_position.y * efs.escape.y
                > 0.0
                for rec in neighbors.workers
            )
            outside = offset_mag >= plan.exit_offset and not blocked
        if not outside:
            # A guide that spawned inside the cluster opens a flee bubble
            # that re-centers on it every tick, so the live COM direction
            # is pure noise there. Commit to one escape heading and plow
            # until the boundary shows up as a one-sided COM offset.
            if efs.escape is None:
                if offset_mag > 1e-9:
                    efs.escape = -1.0 * com.offset.normalized()
                else:
                    efs.escape = Vec2(1.0, 0.0)
            parts.append(efs.escape)
        else:
            efs.escape = None
        if clear and outside:
            return ZERO, SUB_EDGE_FOLLOW, False, False
        if not parts:
            return ZERO, sub, False, False
        combined = parts[0]
        for extra in parts[1:]:
            combined = combined + extra
        if combined.norm() < 1e-9:
            combined = parts[0]
        return combined.normalized() * setup_speed, sub, False, False

    if sub == SUB_EDGE_FOLLOW:
        if com.offset.norm() < 1e-9:
            return ZERO, sub, False, True
        bearing = angle_of(-1.0 * com.offset)
        err = wrapped_angle_diff(bearing, assigned_theta)
        if abs(err) < plan.theta_tol:
            return ZERO, SUB_RADIAL_APPROACH, False, False
        move, _ = edge_follow_step(self_state, neighbors, efs)
        if move.norm() < 1e-12:
            return ZERO, sub, False, False
        togo = _clockwise_to_go(bearing, assigned_theta)
        speed = setup_speed * min(1.0, togo / EDGE_TAPER)
        return move.normalized() * speed, sub, False, False

    if sub == SUB_RADIAL_APPROACH:
        radius = com.offset.norm()
        err = radius - assigned_dist
        if abs(err) < plan.dist_tol:
            return ZERO, sub, True, False
        step = max(-setup_speed, min(setup_speed, err))
        return com.offset.normalized() * step, sub, False, False

    raise ValueError(f"unknown setup sub-phase {sub!r}")


def shaping_step(
    self_state: RobotState,
    neighbors: NeighborSets,
    d_target: float,
    dist_tol: float,
    v_s: float,
) -> tuple[Vec2, bool, bool]:
    """Radial servo toward press depth d_target; (command, done, held)."""
    com = center_of_mass(neighbors.workers)
    if not com.defined:
        return ZERO, False, True
    radius = com.offset.norm()
    err = radius - d_target
    if abs(err) < dist_tol:
        return ZERO, True, False
    step = max(-v_s, min(v_s, err))
    return com.offset.normalized() * step, False, False


def movement_step(
    self_state: RobotState,
    neighbors: NeighborSets,
    plan: MovementPlan,
    target: Vec2,
    station_bearing: float,
    potential: PotentialParams,
    v_max: float,
    team_com: Vec2 | None = None,
    axis_angle: float | None = None,
) -> Vec2:
    """Transport control: station-targeted gap servo plus circulation.

    The radial term servoes the range to the closest visible worker onto
    the station's target gap: com_standoff for front stations, deeper by
    press_bias scaled with rearness for stations astern. Pressing to an
    explicit gap makes the drive force a function of geometry alone; the
    earlier form balanced the waypoint attraction against a standoff
    potential, which tied press depth to the distance left to travel and
    turned front escorts into brakes on final approach. The closest-worker
    range meters the servo because the perceived COM sits a seed-dependent
    0 to 0.35 m beyond the near edge, wider than the usable press window.
    Approach speed is capped tight while retreat may use the whole speed
    budget: overshooting the press by a tick is harmless, but failing to
    clear a worker that a shell bump shoved inside the gap is how edges
    get crushed. The circulation term is a tangent that ramps with the
    wrapped station error about the caller-supplied axis heading. Bearings
    are taken about the fused team COM when one is available: against each
    guide's private estimate the same station errors point different ways,
    and the stations smear around the rim until the rear pair presses
    sideways and the front pair crowds the nose. Nearby guides repel so
    stations can never coincide. Only a guide with no worker in range
    heads for the waypoint directly.
    """
    to_target = target - self_state.position
    dist = to_target.norm()
    if dist > 1e-12:
        # Gain first, then saturate: stay within the engine speed clamp.
        g = to_target * (min(plan.alpha_g * abs(phi(dist, potential)), v_max) / dist)
    else:
        g = ZERO
    sep = ZERO
    for rec in neighbors.guides:
        if 1e-12 < rec.distance < PASS_CLEARANCE:
            away = (-1.0 / rec.distance) * rec.relative_position
            sep = sep + away * (PASS_GAIN * (PASS_CLEARANCE - rec.distance) / PASS_CLEARANCE)
    workers = neighbors.workers
    if not workers:
        return g + sep
    closest = min(workers, key=lambda rec: (rec.distance, rec.id.id))
    com = center_of_mass(workers)
    anchor = team_com if team_com is not None else self_state.position + com.offset
    off = anchor - self_state.position
    radius = off.norm()
    if closest.distance < 1e-9 or radius < 1e-9:
        return g + sep
    off_dir = off.normalized()
    target_gap = plan.com_standoff - plan.press_bias * max(0.0, -math.cos(station_bearing))
    err = closest.distance - target_gap
    step = max(-v_max, min(MOVE_PRESS_SPEED, plan.beta_g * err))
    c = off_dir * step
    a = ZERO
    if axis_angle is None:
        axis = target - anchor
        axis_angle = angle_of(axis) if axis.norm() > 1e-9 else None
    if axis_angle is not None:
        current = wrapped_angle_diff(angle_of(-1.0 * off), axis_angle)
        e = wrapped_angle_diff(current, station_bearing)
        if e != 0.0:
            p = max(-1.0, min(1.0, e / STATION_TAPER))
            a = perpendicular(off_dir) * p
    return c + plan.gamma_g * a + sep


# --- per-guide finite state machine -------------------------------------


@dataclass
class GuideFsmState:
    state: str = STATE_TASK_ALLOCATION
    sub: str = SUB_SEPARATE
    waypoint_index: int = 0
    barrier_pending: bool = False
    pending_since: int = -1
    entered_at: int = 0
    releasing: bool = False
    release_posted: bool = False


@dataclass(frozen=True)
class GuideEvent:
    tick: int
    guide_id: int
    kind: str  # enter_state | barrier_post | barrier_release | waypoint | terminal | lost_cluster
    detail: str


@dataclass(frozen=True)
class GuideConfig:
    plan: ShapingPlan
    movement: MovementPlan
    guide_roster: tuple[int, ...]
    worker_params: WorkerParams = WorkerParams()
    potential: PotentialParams = PotentialParams()
    v_max: float = 0.5
    setup_speed: float = 0.25
    quorum_rounds: int = 3
    gcom_period: int = 10
    rigid_fov: float = 1.4

    def __post_init__(self) -> None:
        if len(self.guide_roster) > self.plan.n_tasks:
            raise ValueError("fewer stations than guides")


class GuideRuntime:
    """Mutable per-guide controller state owned by the engine."""

    __slots__ = (
        "rid",
        "fsm",
        "efs",
        "alloc",
        "assigned_task",
        "assigned_theta",
        "assigned_dist",
        "station_bearing",
        "initialized",
        "last_gcom_tick",
        "holding",
        "axis_hold",
    )

    def __init__(self, rid: RobotId, follow_distance: float = 0.95) -> None:
        self.rid = rid
        self.fsm = GuideFsmState()
        self.efs = EdgeFollowState(follow_distance=follow_distance)
        self.alloc = AllocationState()
        self.assigned_task: int | None = None
        self.assigned_theta = 0.0
        self.assigned_dist = 0.0
        self.station_bearing = 0.0
        self.initialized = False
        self.last_gcom_tick = -(10**9)
        self.holding = False
        self.axis_hold: float | None = None


def fused_com(store: StigmergyStore, guide_roster: tuple[int, ...]) -> Vec2 | None:
    """Sample-weighted mean of the COM estimates the team has shared.

    Each guide only sees the shell of the cluster facing it, so its local
    estimate is pulled toward itself. Weighting by sample count leans the
    fusion toward the guides that see deepest; the residual error points
    away from the waypoint, which makes arrival checks conservative rather
    than premature.
    """
    xs = 0.0
    ys = 0.0
    n = 0
    for g in guide_roster:
        value = store.get(gcom_key(g))
        if value is not None:
            count = int(value[2])
            xs += value[0] * count
            ys += value[1] * count
            n += count
    if n == 0:
        return None
    return Vec2(xs / n, ys / n)


def _enter(fsm: GuideFsmState, state: str, tick: int, events: list[GuideEvent], gid: int) -> None:
    fsm.state = state
    fsm.barrier_pending = False
    fsm.pending_since = -1
    fsm.entered_at = tick
    events.append(GuideEvent(tick, gid, "enter_state", state))


def fsm_tick(
    rt: GuideRuntime,
    tick: int,
    self_state: RobotState,
    neighbors: NeighborSets,
    alloc_inbox: list[AllocationDigest],
    store: StigmergyStore,
    cfg: GuideConfig,
) -> tuple[Vec2, AllocationDigest | None, list[GuideEvent]]:
    """Advance one guide by one tick.

    Returns the velocity command, an allocation digest to broadcast (only
    while the auction runs), and any lifecycle events for the log. Stigmergy
    writes go directly to the guide's own store; the engine's gossip loop
    propagates them.
    """
    events: list[GuideEvent] = []
    out_digest: AllocationDigest | None = None
    cmd = ZERO
    gid = rt.rid.id
    fsm = rt.fsm

    if not rt.initialized:
        stigmergy_put(store, KEY_RHO, cfg.worker_params.rho, gid)
        stigmergy_put(store, KEY_FOV, cfg.worker_params.fov, gid)
        stigmergy_put(store, KEY_RFOV, cfg.worker_params.rfov, gid)
        stigmergy_put(store, KEY_MODE, int(WorkerMode.LOOSE), gid)
        rt.initialized = True
        events.append(GuideEvent(tick, gid, "enter_state", STATE_TASK_ALLOCATION))

    if fsm.state == STATE_TASK_ALLOCATION:
        if gid not in rt.alloc.bids:
            com = center_of_mass(neighbors.workers)
            if com.defined:
                row = compute_costs(self_state, com, cfg.plan.theta_targets, cfg.plan.dist_targets)
                bids = dict(rt.alloc.bids)
                bids[gid] = row
                rt.alloc = AllocationState(bids=bids, assignment=dict(rt.alloc.assignment), stable_rounds=0)
        if gid in rt.alloc.bids:
            rt.alloc, out_digest = consensus_round(gid, rt.alloc, alloc_inbox, cfg.plan.n_tasks)
        if not fsm.barrier_pending and allocation_done(rt.alloc, cfg.guide_roster, cfg.quorum_rounds):
            task = rt.alloc.assignment[gid]
            rt.assigned_task = task
            rt.assigned_theta = cfg.plan.theta_targets[task]
            rt.assigned_dist = cfg.plan.dist_targets[task]
            barrier_post(store, STATE_TASK_ALLOCATION, gid)
            fsm.barrier_pending = True
            fsm.pending_since = tick
            events.append(GuideEvent(tick, gid, "barrier_post", STATE_TASK_ALLOCATION))
        if fsm.barrier_pending and barrier_check(store, STATE_TASK_ALLOCATION, cfg.guide_roster):
            events.append(GuideEvent(tick, gid, "barrier_release", STATE_TASK_ALLOCATION))
            _enter(fsm, STATE_SHAPING_SETUP, tick, events, gid)
            fsm.sub = SUB_SEPARATE

    elif fsm.state == STATE_SHAPING_SETUP:
        if fsm.barrier_pending:
            if barrier_check(store, STATE_SHAPING_SETUP, cfg.guide_roster):
                events.append(GuideEvent(tick, gid, "barrier_release", STATE_SHAPING_SETUP))
                _enter(fsm, STATE_SHAPING, tick, events, gid)
                stigmergy_put(store, KEY_MODE, int(WorkerMode.SHAPE), gid)
            else:
                cmd = station_hold_step(
                    self_state,
                    neighbors,
                    rt.assigned_theta,
                    rt.assigned_dist,
                    HOLD_THETA_TOL,
                    cfg.plan.dist_tol,
                    cfg.setup_speed,
                )
        else:
            cmd, fsm.sub, done, held = shaping_setup_step(
                self_state,
                neighbors,
                cfg.plan,
                rt.assigned_theta,
                rt.assigned_dist,
                rt.efs,
                fsm.sub,
                cfg.potential,
                cfg.setup_speed,
            )
            _note_holding(rt, held, tick, events)
            if done:
                barrier_post(store, STATE_SHAPING_SETUP, gid)
                fsm.barrier_pending = True
                fsm.pending_since = tick
                events.append(GuideEvent(tick, gid, "barrier_post", STATE_SHAPING_SETUP))

    elif fsm.state == STATE_SHAPING:
        if fsm.releasing:
            # The press is done swarm-wide; everyone backs off to the
            # transport standoff before any dent gets frozen as a target.
            assert rt.assigned_task is not None
            cmd = press_release_step(
                self_state,
                neighbors,
                rt.assigned_theta,
                cfg.movement.com_standoff,
                HOLD_THETA_TOL,
                RELEASE_GAP_TOL,
                cfg.plan.v_s,
            )
            if not fsm.release_posted:
                gap = closest_worker_gap(neighbors)
                # Post threshold sits outside the servo deadband, or guides
                # park a hair under it and the barrier never fills.
                if gap is not None and gap >= cfg.movement.com_standoff - 2.0 * RELEASE_GAP_TOL:
                    com = center_of_mass(neighbors.workers)
                    if com.defined and com.offset.norm() > 1e-9:
                        stigmergy_put(store, bearing_key(gid), angle_of(-1.0 * com.offset), gid)
                        estimate = self_state.position + com.offset
                        snapped = (
                            round(estimate.x / GCOM_GRID) * GCOM_GRID,
                            round(estimate.y / GCOM_GRID) * GCOM_GRID,
                            com.count,
                        )
                        stigmergy_put(store, gcom_key(gid), snapped, gid)
                    barrier_post(store, TAG_SHAPING_RELEASE, gid)
                    fsm.release_posted = True
                    events.append(GuideEvent(tick, gid, "barrier_post", TAG_SHAPING_RELEASE))
            elif barrier_check(store, TAG_SHAPING_RELEASE, cfg.guide_roster):
                events.append(GuideEvent(tick, gid, "barrier_release", TAG_SHAPING_RELEASE))
                rt.station_bearing = _assigned_station(
                    gid, store, cfg.guide_roster, cfg.movement.waypoints[0], self_state, neighbors
                )
                _enter(fsm, STATE_MOVEMENT, tick, events, gid)
                fsm.waypoint_index = 0
                # Widen the sensing disc before the rigid snapshot so the
                # lock graph braces diagonals; a web locked at the shaping
                # fov leaves unlinked pairs a press can drive together.
                stigmergy_put(store, KEY_FOV, cfg.rigid_fov, gid)
                stigmergy_put(store, KEY_MODE, int(WorkerMode.RIGID), gid)
        elif fsm.barrier_pending:
            if barrier_check(store, STATE_SHAPING, cfg.guide_roster):
                events.append(GuideEvent(tick, gid, "barrier_release", STATE_SHAPING))
                fsm.barrier_pending = False
                fsm.releasing = True
            else:
                assert rt.assigned_task is not None
                cmd = station_hold_step(
                    self_state,
                    neighbors,
                    rt.assigned_theta,
                    cfg.plan.press_depth(rt.assigned_task),
                    HOLD_THETA_TOL,
                    cfg.plan.dist_tol,
                    cfg.plan.v_s,
                )
        else:
            assert rt.assigned_task is not None
            depth = cfg.plan.press_depth(rt.assigned_task)
            cmd, done, held = shaping_step(self_state, neighbors, depth, cfg.plan.dist_tol, cfg.plan.v_s)
            _note_holding(rt, held, tick, events)
            if done:
                barrier_post(store, STATE_SHAPING, gid)
                fsm.barrier_pending = True
                fsm.pending_since = tick
                events.append(GuideEvent(tick, gid, "barrier_post", STATE_SHAPING))

    elif fsm.state == STATE_MOVEMENT:
        waypoint = cfg.movement.waypoints[fsm.waypoint_index]
        com = center_of_mass(neighbors.workers)
        if com.defined and tick - rt.last_gcom_tick >= cfg.gcom_period:
            estimate = self_state.position + com.offset
            snapped = (
                round(estimate.x / GCOM_GRID) * GCOM_GRID,
                round(estimate.y / GCOM_GRID) * GCOM_GRID,
                com.count,
            )
            if store.get(gcom_key(gid)) != snapped:
                stigmergy_put(store, gcom_key(gid), snapped, gid)
            rt.last_gcom_tick = tick
        team_com = fused_com(store, cfg.guide_roster)
        if team_com is None and com.defined:
            team_com = self_state.position + com.offset
        if team_com is not None and (waypoint - team_com).norm() <= ARRIVAL_MARGIN * cfg.movement.arrival_tol:
            if fsm.waypoint_index + 1 < len(cfg.movement.waypoints):
                fsm.waypoint_index += 1
                rt.axis_hold = None
                events.append(GuideEvent(tick, gid, "waypoint", str(fsm.waypoint_index)))
            else:
                _enter(fsm, STATE_TERMINAL, tick, events, gid)
                events.append(GuideEvent(tick, gid, "terminal", f"waypoints={len(cfg.movement.waypoints)}"))
        else:
            anchor = team_com
            if anchor is None and com.defined:
                anchor = self_state.position + com.offset
            if anchor is not None:
                axis_vec = waypoint - anchor
                # Hold the last heading on final approach; see AXIS_FREEZE_RANGE.
                if axis_vec.norm() >= AXIS_FREEZE_RANGE or rt.axis_hold is None:
                    if axis_vec.norm() > 1e-9:
                        rt.axis_hold = angle_of(axis_vec)
            cmd = movement_step(
                self_state,
                neighbors,
                cfg.movement,
                waypoint,
                rt.station_bearing,
                cfg.potential,
                cfg.v_max,
                team_com,
                rt.axis_hold,
            )
            _note_holding(rt, not com.defined, tick, events)

    return cmd, out_digest, events


def _station_bearing(self_state: RobotState, com, waypoint: Vec2) -> float:
    """Bearing of the guide about the COM, relative to the COM-to-waypoint
    axis, frozen at transport start so the formation travels as built."""
    if not com.defined or com.offset.norm() < 1e-9:
        return 0.0
    axis = waypoint - (self_state.position + com.offset)
    if axis.norm() < 1e-9:
        return 0.0
    return wrapped_angle_diff(angle_of(-1.0 * com.offset), angle_of(axis))


def station_slots(n: int) -> list[float]:
    """Transport stations about the cluster, as bearings relative to the
    COM-to-waypoint axis, sorted ascending.

    Two guides take a narrow rear wedge. Larger teams spread evenly with a
    half-slot offset so no station lands dead ahead or dead astern: the
    rear-half guides push the formation while the front-half guides park
    outside worker sensing range and keep the shared COM estimate balanced.
    """
    if n <= 1:
        return [math.pi] * max(n, 0)
    if n == 2:
        return [math.pi - 0.35, math.pi + 0.35]
    spacing = 2.0 * math.pi / n
    return [math.pi + spacing * (j + 0.5 - n / 2.0) for j in range(n)]


def _assigned_station(
    gid: int,
    store: StigmergyStore,
    roster: tuple[int, ...],
    waypoint: Vec2,
    self_state: RobotState,
    neighbors: NeighborSets,
) -> float:
    """Pick this guide's transport station from the shared slot template.

    Every guide ranks the team by the COM bearings posted with the release
    barrier and takes the slot matching its own rank, so the assignment is
    injective and identical on every replica without further negotiation.
    Bearings are compared in [0, 2pi) measured from the waypoint axis: the
    slots all sit in the open rear arc, so rank order matches slot order
    and guides never cross each other on the way to their stations.
    """
    team = fused_com(store, roster)
    if team is None:
        com = center_of_mass(neighbors.workers)
        return _station_bearing(self_state, com, waypoint)
    axis_vec = waypoint - team
    if axis_vec.norm() < 1e-9:
        com = center_of_mass(neighbors.workers)
        return _station_bearing(self_state, com, waypoint)
    axis = angle_of(axis_vec)
    ranked = []
    for g in roster:
        value = store.get(bearing_key(g))
        bearing = float(value) if value is not None else 0.0
        ranked.append(((bearing - axis) % (2.0 * math.pi), g))
    ranked.sort()
    rank = next(i for i, (_, g) in enumerate(ranked) if g == gid)
    return station_slots(len(ranked))[rank]


def _note_holding(rt: GuideRuntime, held: bool, tick: int, events: list[GuideEvent]) -> None:
    if held and not rt.holding:
        events.append(GuideEvent(tick, rt.rid.id, "lost_cluster", rt.fsm.state))
    rt.holding = held
