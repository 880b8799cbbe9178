"""Discrete-time world model: sensing, comms transport, integration.

Each tick runs a fixed pipeline:

1. deliver messages queued last tick (stigmergy merges, allocation digests);
2. sense: one KD-tree query yields every directed neighbor pair within d_com;
3. apply merged worker parameters and mode transitions (locks snapshot here);
4. prune formation locks against current distances, then evaluate controls
   (workers vectorized, guides per-robot);
5. queue outgoing broadcasts using this tick's positions;
6. clamp speeds, integrate, and log.

Determinism contract: for a fixed seed the whole run is a pure function of
the initial world. All reductions happen in sorted (source id, neighbor id)
order, matching the per-robot reference controllers term for term, so the
vectorized worker path produces bit-identical forces to worker_control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from swarmherd.allocation import AllocationDigest
from swarmherd.comms import (
    KEY_FOV,
    KEY_MODE,
    KEY_RFOV,
    KEY_RHO,
    StigmergyStore,
)
from swarmherd.geometry import (
    NeighborRecord,
    NeighborSets,
    RobotId,
    RobotState,
    Role,
    Vec2,
    angle_of,
    build_neighbor_sets,
)
from swarmherd.guides import (
    STATE_MOVEMENT,
    STATE_TERMINAL,
    GuideConfig,
    GuideEvent,
    GuideRuntime,
    fsm_tick,
)
from swarmherd.potential import PotentialParams
from swarmherd.workers import (
    EMERGENCY_GAIN,
    EMERGENCY_RADIUS,
    FormationLock,
    WorkerGains,
    WorkerMode,
    WorkerParams,
    worker_control,
)

INIT_DENSITY = 0.1
INIT_FILL = 0.9155
MAX_SAMPLING_REJECTIONS = 10_000


class SimulationAbort(RuntimeError):
    """Raised when the world state stops being trustworthy (non-finite)."""


@dataclass(frozen=True)
class EngineParams:
    dt: float = 0.1
    v_max: float = 0.5
    radius: float = 0.07
    d_com: float = 2.0
    loss_rate: float = 0.0
    anti_entropy_period: int = 50
    log_every: int = 1
    log_messages: bool = False

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.v_max <= 0 or self.radius <= 0 or self.d_com <= 0:
            raise ValueError("dt, v_max, radius, d_com must all be positive")
        if not 0.0 <= self.loss_rate < 1.0:
            raise ValueError("loss_rate must be in [0, 1)")


@dataclass
class WorldLog:
    trajectory: list = field(default_factory=list)  # (tick, robot_id, role, x, y, state)
    events: list = field(default_factory=list)  # GuideEvent
    messages: list = field(default_factory=list)  # (tick, sender, receiver, kind)
    min_pair_distance: list = field(default_factory=list)
    rigid_edge_error: list = field(default_factory=list)  # max |d - target|, nan if no rigid lock
    worker_com: list = field(default_factory=list)
    delivered: list = field(default_factory=list)
    movement_start_tick: int | None = None
    movement_start_positions: np.ndarray | None = None
    final_tick: int | None = None
    final_positions: np.ndarray | None = None


@dataclass(frozen=True)
class RunResult:
    status: str  # completed | timeout | aborted
    ticks: int
    reason: str = ""


def default_half_width(n: int, density: float = INIT_DENSITY, fill: float = INIT_FILL) -> float:
    """Half-width of the default spawn square: sized so n robots at the
    reference density fill about 90 percent of it, plus a 4 m margin."""
    return math.sqrt(fill * n / density) / 2.0 + 4.0


def _sample_positions(
    rng: np.random.Generator,
    count: int,
    region: tuple[float, float, float, float],
    min_separation: float,
    taken: list[tuple[float, float]],
) -> list[tuple[float, float]]:
    xmin, xmax, ymin, ymax = region
    placed: list[tuple[float, float]] = []
    rejections = 0
    existing = list(taken)
    while len(placed) < count:
        x = rng.uniform(xmin, xmax)
        y = rng.uniform(ymin, ymax)
        ok = True
        for px, py in existing:
            if (x - px) ** 2 + (y - py) ** 2 < min_separation**2:
                ok = False
                break
        if ok:
            placed.append((x, y))
            existing.append((x, y))
            rejections = 0
        else:
            rejections += 1
            if rejections >= MAX_SAMPLING_REJECTIONS:
                raise ValueError(
                    f"could not place robot {len(placed) + len(taken)}: "
                    f"{rejections} consecutive rejections in region {region}"
                )
    return placed


class World:
    """Array-of-robots state plus per-robot controller bookkeeping."""

    def __init__(
        self,
        n_workers: int,
        n_guides: int,
        positions: np.ndarray,
        params: EngineParams,
        worker_params: WorkerParams,
        gains: WorkerGains,
        potential: PotentialParams,
        guide_cfg: GuideConfig | None,
        rng: np.random.Generator,
    ) -> None:
        n = n_workers + n_guides
        if positions.shape != (n, 2):
            raise ValueError(f"positions must be ({n}, 2), got {positions.shape}")
        self.n_workers = n_workers
        self.n_guides = n_guides
        self.n = n
        self.params = params
        self.gains = gains
        self.potential = potential
        self.guide_cfg = guide_cfg
        self.rng = rng

        self.ids = [RobotId(i, Role.WORKER if i < n_workers else Role.GUIDE) for i in range(n)]
        self.is_worker = np.array([i < n_workers for i in range(n)], dtype=bool)
        self.pos = positions.astype(np.float64).copy()
        self.control = np.zeros((n, 2), dtype=np.float64)

        self.rho = np.full(n, worker_params.rho, dtype=np.float64)
        self.fov = np.full(n, worker_params.fov, dtype=np.float64)
        self.rfov = np.full(n, worker_params.rfov, dtype=np.float64)
        self.mode = np.full(n, int(worker_params.mode), dtype=np.int8)

        self.locks: list[dict[int, float] | None] = [None] * n
        self.lock_tick = [0] * n
        self._lock_dirty = True
        self._lock_src = np.zeros(0, dtype=np.int64)
        self._lock_dst = np.zeros(0, dtype=np.int64)
        self._lock_tgt = np.zeros(0, dtype=np.float64)

        self.stores = [StigmergyStore() for _ in range(n)]
        self._last_broadcast_rev = [0] * n
        self._last_applied_rev = [0] * n

        self.guide_runtimes: dict[int, GuideRuntime] = {}
        if n_guides:
            if guide_cfg is None:
                raise ValueError("worlds with guides need a GuideConfig")
            for i in range(n_workers, n):
                self.guide_runtimes[i] = GuideRuntime(self.ids[i])

        self.alloc_relay: list[dict[int, tuple] | None] = [
            {} if i < n_workers else None for i in range(n)
        ]
        self._relay_dirty = [False] * n
        self._alloc_inbox: dict[int, list[AllocationDigest]] = {}
        self._pending: list[tuple[np.ndarray, int, object]] = []  # (receivers, sender, payload)

        self.tick = 0
        self.log = WorldLog()

    # -- convenience views -------------------------------------------

    def robot_state(self, i: int) -> RobotState:
        rt = self.guide_runtimes.get(i)
        return RobotState(
            rid=self.ids[i],
            position=Vec2(self.pos[i, 0], self.pos[i, 1]),
            control=Vec2(self.control[i, 0], self.control[i, 1]),
            mode=int(self.mode[i]),
            fsm=rt.fsm.state if rt is not None else "",
        )

    def formation_lock(self, i: int) -> FormationLock | None:
        table = self.locks[i]
        if table is None:
            return None
        return FormationLock(
            lookup_ids={self.ids[j] for j in table},
            lookup_distances={self.ids[j]: d for j, d in table.items()},
            locked_at_tick=self.lock_tick[i],
        )

    def state_tag(self, i: int) -> str:
        rt = self.guide_runtimes.get(i)
        if rt is not None:
            return rt.fsm.state
        return WorkerMode(int(self.mode[i])).name.lower()

    def all_guides_terminal(self) -> bool:
        if not self.guide_runtimes:
            return False
        return all(rt.fsm.state == STATE_TERMINAL for rt in self.guide_runtimes.values())


def init_world(
    n_workers: int,
    n_guides: int,
    seed: int,
    *,
    params: EngineParams = EngineParams(),
    worker_params: WorkerParams = WorkerParams(),
    gains: WorkerGains = WorkerGains(),
    potential: PotentialParams = PotentialParams(),
    guide_cfg: GuideConfig | None = None,
    worker_region: tuple[float, float, float, float] | None = None,
    guide_region: tuple[float, float, float, float] | None = None,
    positions: np.ndarray | None = None,
) -> World:
    """Build a world with sampled or explicit starting positions.

    By default all robots land uniformly in a square sized by
    ``default_half_width`` for the swarm size, rejection-sampled to keep
    every pair at least two body radii apart. Explicit regions let scenarios
    spawn the workers as a tight patch with the guides around it.
    """
    if n_workers < 0 or n_guides < 0 or n_workers + n_guides == 0:
        raise ValueError("need at least one robot")
    n = n_workers + n_guides
    rng = np.random.default_rng(seed)
    if positions is not None:
        pts = np.asarray(positions, dtype=np.float64)
        if pts.shape != (n, 2):
            raise ValueError(f"positions must be ({n}, 2), got {pts.shape}")
    else:
        a = default_half_width(n)
        square = (-a, a, -a, a)
        wreg = worker_region if worker_region is not None else square
        greg = guide_region if guide_region is not None else square
        min_sep = 2.0 * params.radius
        workers = _sample_positions(rng, n_workers, wreg, min_sep, [])
        guides = _sample_positions(rng, n_guides, greg, min_sep, workers)
        pts = np.array(workers + guides, dtype=np.float64)
    return World(
        n_workers=n_workers,
        n_guides=n_guides,
        positions=pts,
        params=params,
        worker_params=worker_params,
        gains=gains,
        potential=potential,
        guide_cfg=guide_cfg,
        rng=rng,
    )


# -- vector potentials ----------------------------------------------------


def _phi_vec(e: np.ndarray, pot: PotentialParams) -> np.ndarray:
    mag = pot.k * e * np.abs(e) / 2.0
    return pot.a0 + mag if pot.printed_sign else pot.a0 - mag


def _phi_plus_vec(e: np.ndarray, pot: PotentialParams) -> np.ndarray:
    return np.where(e >= 0.0, 0.0, _phi_vec(e, pot))


# -- sensing ---------------------------------------------------------------


def _directed_pairs(world: World) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """All directed neighbor pairs within d_com, lexsorted by (src, dst).

    Returns (src, dst, distance, row_bounds); row_bounds[i]:row_bounds[i+1]
    slices out robot i's neighbors in ascending-id order, which is the
    summation order the reference controllers use.
    """
    tree = cKDTree(world.pos)
    pairs = tree.query_pairs(world.params.d_com, output_type="ndarray")
    if pairs.size == 0:
        src = np.zeros(0, dtype=np.int64)
        dst = np.zeros(0, dtype=np.int64)
        dist = np.zeros(0, dtype=np.float64)
    else:
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        order = np.lexsort((dst, src))
        src = src[order]
        dst = dst[order]
        dvec = world.pos[dst] - world.pos[src]
        dist = np.hypot(dvec[:, 0], dvec[:, 1])
    bounds = np.searchsorted(src, np.arange(world.n + 1))
    return src, dst, dist, bounds


def neighbor_sets_for(
    world: World,
    i: int,
    src: np.ndarray,
    dst: np.ndarray,
    dist: np.ndarray,
    bounds: np.ndarray,
) -> NeighborSets:
    """Materialize robot i's NeighborSets from the shared pair arrays."""
    lo, hi = bounds[i], bounds[i + 1]
    records = []
    for k in range(lo, hi):
        j = int(dst[k])
        rel = Vec2(world.pos[j, 0] - world.pos[i, 0], world.pos[j, 1] - world.pos[i, 1])
        d = float(dist[k])
        bearing = angle_of(rel) if d > 0.0 else 0.0
        records.append(NeighborRecord(id=world.ids[j], relative_position=rel, distance=d, bearing=bearing))
    return build_neighbor_sets(records, d_fov=float(world.fov[i]), d_rfov=float(world.rfov[i]))


def scalar_worker_control(world: World, i: int, neighbors: NeighborSets) -> Vec2:
    """Reference-path control for worker i; the vectorized path must match
    this bit for bit."""
    params = WorkerParams(
        rho=float(world.rho[i]),
        fov=float(world.fov[i]),
        rfov=float(world.rfov[i]),
        mode=WorkerMode(int(world.mode[i])),
    )
    return worker_control(
        self_state=world.robot_state(i),
        neighbors=neighbors,
        params=params,
        gains=world.gains,
        lock=world.formation_lock(i),
        potential=world.potential,
    )


# -- locks -----------------------------------------------------------------


def _rebuild_lock_arrays(world: World) -> None:
    src: list[int] = []
    dst: list[int] = []
    tgt: list[float] = []
    for i in range(world.n_workers):
        table = world.locks[i]
        if not table:
            continue
        for j in sorted(table):
            src.append(i)
            dst.append(j)
            tgt.append(table[j])
    world._lock_src = np.array(src, dtype=np.int64)
    world._lock_dst = np.array(dst, dtype=np.int64)
    world._lock_tgt = np.array(tgt, dtype=np.float64)
    world._lock_dirty = False


def _apply_worker_stigmergy(
    world: World,
    src: np.ndarray,
    dst: np.ndarray,
    dist: np.ndarray,
    bounds: np.ndarray,
) -> None:
    """Fold freshly merged parameter/mode values into the worker arrays.

    Mode transitions snapshot the formation lock from the current
    field-of-view worker neighbors, exactly as transition_mode does.
    """
    transitions = 0
    new_mode_name = ""
    for i in range(world.n_workers):
        store = world.stores[i]
        if store.revision == world._last_applied_rev[i]:
            continue
        world._last_applied_rev[i] = store.revision
        rho = store.get(KEY_RHO)
        if rho is not None:
            world.rho[i] = float(rho)
        fov = store.get(KEY_FOV)
        if fov is not None:
            world.fov[i] = float(fov)
        rfov = store.get(KEY_RFOV)
        if rfov is not None:
            world.rfov[i] = float(rfov)
        mode = store.get(KEY_MODE)
        if mode is None or int(mode) == int(world.mode[i]):
            continue
        new_mode = int(mode)
        world.mode[i] = new_mode
        if new_mode == int(WorkerMode.LOOSE):
            world.locks[i] = None
        else:
            lo, hi = bounds[i], bounds[i + 1]
            table: dict[int, float] = {}
            for k in range(lo, hi):
                j = int(dst[k])
                if world.is_worker[j] and dist[k] <= world.fov[i]:
                    table[j] = float(dist[k])
            world.locks[i] = table
            world.lock_tick[i] = world.tick
            if world.alloc_relay[i] is not None:
                world.alloc_relay[i] = None  # auction is over once shaping starts
        world._lock_dirty = True
        transitions += 1
        new_mode_name = WorkerMode(new_mode).name.lower()
    if transitions:
        world.log.events.append(
            GuideEvent(world.tick, -1, "mode_wave", f"{new_mode_name}:{transitions}")
        )


def _prune_locks(world: World) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Drop over-stretched locked links; returns live lock arrays with
    current distances. Also records the per-tick rigid edge error."""
    if world._lock_dirty:
        _rebuild_lock_arrays(world)
    ls, lt, ltgt = world._lock_src, world._lock_dst, world._lock_tgt
    if ls.size == 0:
        world.log.rigid_edge_error.append(math.nan)
        return ls, lt, ltgt, np.zeros(0, dtype=np.float64)
    dvec = world.pos[lt] - world.pos[ls]
    ld = np.hypot(dvec[:, 0], dvec[:, 1])
    modes = world.mode[ls]
    drop = ((modes == int(WorkerMode.SHAPE)) & (ld > world.fov[ls])) | (
        (modes == int(WorkerMode.RIGID)) & (ld >= world.params.d_com)
    )
    if drop.any():
        for k in np.nonzero(drop)[0]:
            table = world.locks[int(ls[k])]
            if table is not None:
                table.pop(int(lt[k]), None)
        _rebuild_lock_arrays(world)
        ls, lt, ltgt = world._lock_src, world._lock_dst, world._lock_tgt
        if ls.size == 0:
            world.log.rigid_edge_error.append(math.nan)
            return ls, lt, ltgt, np.zeros(0, dtype=np.float64)
        dvec = world.pos[lt] - world.pos[ls]
        ld = np.hypot(dvec[:, 0], dvec[:, 1])
    rigid = world.mode[ls] == int(WorkerMode.RIGID)
    if rigid.any():
        world.log.rigid_edge_error.append(float(np.max(np.abs(ld[rigid] - ltgt[rigid]))))
    else:
        world.log.rigid_edge_error.append(math.nan)
    return ls, lt, ltgt, ld


# -- worker forces ----------------------------------------------------------


def _worker_forces(
    world: World,
    src: np.ndarray,
    dst: np.ndarray,
    dist: np.ndarray,
    lock_src: np.ndarray,
    lock_dst: np.ndarray,
    lock_tgt: np.ndarray,
    lock_dist: np.ndarray,
) -> np.ndarray:
    """u = alpha*w + beta*g for every worker, term-for-term identical to
    worker_control run per robot."""
    n = world.n
    pot = world.potential
    wsum = np.zeros((n, 2))
    wcount = np.zeros(n)
    gsum = np.zeros((n, 2))
    gcount = np.zeros(n)
    esum = np.zeros((n, 2))

    if src.size:
        loose = (
            world.is_worker[src]
            & world.is_worker[dst]
            & (world.mode[src] == int(WorkerMode.LOOSE))
            & (dist <= world.fov[src])
        )
        if loose.any():
            s = src[loose]
            d = dist[loose]
            val = _phi_vec(d - world.rho[s], pot)
            dx = world.pos[s, 0] - world.pos[dst[loose], 0]
            dy = world.pos[s, 1] - world.pos[dst[loose], 1]
            wsum[:, 0] += np.bincount(s, weights=val * dx / d, minlength=n)
            wsum[:, 1] += np.bincount(s, weights=val * dy / d, minlength=n)
            wcount += np.bincount(s, minlength=n)

        repel = world.is_worker[src] & ~world.is_worker[dst] & (dist <= world.rfov[src])
        if repel.any():
            s = src[repel]
            d = dist[repel]
            val = _phi_plus_vec(d - world.rho[s], pot)
            dx = world.pos[s, 0] - world.pos[dst[repel], 0]
            dy = world.pos[s, 1] - world.pos[dst[repel], 1]
            gsum[:, 0] += np.bincount(s, weights=val * dx / d, minlength=n)
            gsum[:, 1] += np.bincount(s, weights=val * dy / d, minlength=n)
            gcount += np.bincount(s, minlength=n)

        danger = (
            world.is_worker[src]
            & world.is_worker[dst]
            & (dist < EMERGENCY_RADIUS)
            & (dist > 0.0)
        )
        if danger.any():
            s = src[danger]
            d = dist[danger]
            val = EMERGENCY_GAIN * (EMERGENCY_RADIUS - d) / EMERGENCY_RADIUS
            dx = world.pos[s, 0] - world.pos[dst[danger], 0]
            dy = world.pos[s, 1] - world.pos[dst[danger], 1]
            esum[:, 0] += np.bincount(s, weights=val * dx / d, minlength=n)
            esum[:, 1] += np.bincount(s, weights=val * dy / d, minlength=n)

    if lock_src.size:
        live = world.mode[lock_src] != int(WorkerMode.LOOSE)
        s = lock_src[live]
        if s.size:
            d = lock_dist[live]
            val = _phi_vec(d - lock_tgt[live], pot)
            dx = world.pos[s, 0] - world.pos[lock_dst[live], 0]
            dy = world.pos[s, 1] - world.pos[lock_dst[live], 1]
            wsum[:, 0] += np.bincount(s, weights=val * dx / d, minlength=n)
            wsum[:, 1] += np.bincount(s, weights=val * dy / d, minlength=n)
            wcount += np.bincount(s, minlength=n)

    u = np.zeros((n, 2))
    np.divide(wsum, wcount[:, None], out=u, where=wcount[:, None] > 0)
    g = np.zeros((n, 2))
    np.divide(gsum, gcount[:, None], out=g, where=gcount[:, None] > 0)
    u = world.gains.alpha * u + world.gains.beta * g + esum
    u[~world.is_worker] = 0.0
    return u


# -- comms ------------------------------------------------------------------


def _deliver_pending(world: World) -> None:
    """Apply everything queued last tick: merge digests, fill allocation
    inboxes, feed worker relays."""
    world._alloc_inbox = {}
    delivered = 0
    pending = world._pending
    world._pending = []
    lossy = world.params.loss_rate > 0.0
    for receivers, sender, payload in pending:
        if lossy:
            keep = world.rng.random(receivers.size) >= world.params.loss_rate
            receivers = receivers[keep]
        for r in receivers:
            r = int(r)
            delivered += 1
            if isinstance(payload, tuple):  # stigmergy digest
                world.stores[r].merge(payload)
            elif isinstance(payload, AllocationDigest):
                if world.guide_runtimes.get(r) is not None:
                    world._alloc_inbox.setdefault(r, []).append(payload)
                else:
                    cache = world.alloc_relay[r]
                    if cache is not None:
                        grew = False
                        for gid, row in payload.rows:
                            if gid not in cache:
                                cache[gid] = row
                                grew = True
                        if grew:
                            world._relay_dirty[r] = True
            if world.params.log_messages:
                kind = "stigmergy" if isinstance(payload, tuple) else "allocation"
                world.log.messages.append((world.tick, sender, r, kind))
    world.log.delivered.append(delivered)


def _queue_broadcasts(
    world: World,
    bounds: np.ndarray,
    dst: np.ndarray,
    guide_digests: dict[int, AllocationDigest],
) -> None:
    """Change-gated gossip plus staggered anti-entropy, from this tick's
    positions (receivers are whoever is in range right now)."""
    period = world.params.anti_entropy_period
    for i in range(world.n):
        receivers = None
        store = world.stores[i]
        due = store.revision != world._last_broadcast_rev[i] or (
            period > 0 and (world.tick + i) % period == 0
        )
        if due and store.entries:
            receivers = dst[bounds[i] : bounds[i + 1]].copy()
            if receivers.size:
                world._pending.append((receivers, i, store.digest()))
            world._last_broadcast_rev[i] = store.revision
        digest = guide_digests.get(i)
        if digest is None and world._relay_dirty[i]:
            cache = world.alloc_relay[i]
            if cache:
                digest = AllocationDigest(rows=tuple(sorted(cache.items())))
            world._relay_dirty[i] = False
        if digest is not None:
            if receivers is None:
                receivers = dst[bounds[i] : bounds[i + 1]].copy()
            if receivers.size:
                world._pending.append((receivers, i, digest))


# -- the tick ---------------------------------------------------------------


def step(world: World) -> None:
    """Advance the world by one tick through the six-phase pipeline."""
    _deliver_pending(world)

    src, dst, dist, bounds = _directed_pairs(world)
    world.log.min_pair_distance.append(float(dist.min()) if dist.size else math.inf)

    _apply_worker_stigmergy(world, src, dst, dist, bounds)
    lock_src, lock_dst, lock_tgt, lock_dist = _prune_locks(world)

    u = _worker_forces(world, src, dst, dist, lock_src, lock_dst, lock_tgt, lock_dist)

    guide_digests: dict[int, AllocationDigest] = {}
    for i in sorted(world.guide_runtimes):
        rt = world.guide_runtimes[i]
        neighbors = neighbor_sets_for(world, i, src, dst, dist, bounds)
        cmd, digest, events = fsm_tick(
            rt,
            world.tick,
            world.robot_state(i),
            neighbors,
            world._alloc_inbox.get(i, []),
            world.stores[i],
            world.guide_cfg,
        )
        u[i, 0] = cmd.x
        u[i, 1] = cmd.y
        if digest is not None:
            guide_digests[i] = digest
        for ev in events:
            world.log.events.append(ev)
            if ev.kind == "enter_state" and ev.detail == STATE_MOVEMENT:
                if world.log.movement_start_tick is None:
                    world.log.movement_start_tick = world.tick
                    world.log.movement_start_positions = world.pos.copy()

    _queue_broadcasts(world, bounds, dst, guide_digests)

    if not np.isfinite(u).all():
        bad = int(np.nonzero(~np.isfinite(u).all(axis=1))[0][0])
        raise SimulationAbort(f"non-finite control for robot {bad} at tick {world.tick}")
    speed = np.hypot(u[:, 0], u[:, 1])
    scale = np.ones(world.n)
    over = speed > world.params.v_max
    scale[over] = world.params.v_max / speed[over]
    world.control = u * scale[:, None]
    world.pos += world.control * world.params.dt
    if not np.isfinite(world.pos).all():
        bad = int(np.nonzero(~np.isfinite(world.pos).all(axis=1))[0][0])
        raise SimulationAbort(f"non-finite position for robot {bad} at tick {world.tick}")

    if world.n_workers:
        com = world.pos[: world.n_workers].mean(axis=0)
        world.log.worker_com.append((float(com[0]), float(com[1])))
    if world.params.log_every > 0 and world.tick % world.params.log_every == 0:
        for i in range(world.n):
            world.log.trajectory.append(
                (
                    world.tick,
                    i,
                    "worker" if world.is_worker[i] else "guide",
                    float(world.pos[i, 0]),
                    float(world.pos[i, 1]),
                    world.state_tag(i),
                )
            )
    world.tick += 1


def run(world: World, max_ticks: int, progress=None, progress_every: int = 1000) -> RunResult:
    """Step until every guide is terminal, the tick budget runs out, or the
    state goes bad. Worlds without guides just run out the budget."""
    for _ in range(max_ticks):
        try:
            step(world)
        except SimulationAbort as exc:
            _final_snapshot(world)
            world.log.events.append(GuideEvent(world.tick, -1, "abort", str(exc)))
            return RunResult(status="aborted", ticks=world.tick, reason=str(exc))
        if progress is not None and world.tick % progress_every == 0:
            progress(world.tick, world)
        if world.all_guides_terminal():
            _final_snapshot(world)
            return RunResult(status="completed", ticks=world.tick)
    _final_snapshot(world)
    if world.n_guides == 0:
        return RunResult(status="completed", ticks=world.tick)
    return RunResult(status="timeout", ticks=world.tick, reason=f"not terminal after {max_ticks} ticks")


def _final_snapshot(world: World) -> None:
    world.log.final_tick = world.tick
    world.log.final_positions = world.pos.copy()
