"""Decentralized station assignment for the guide team.

Each guide computes one frozen row of costs (its distance to every candidate
station around the worker cluster), floods the row to its peers, and runs the
same deterministic matching over whatever rows it has collected so far. Rows
never change after being computed, so the bid tables converge by union and
every guide eventually evaluates the matching on identical input. A quorum
counter guards against acting on a partial table: the allocation is only
"done" after the matching has survived several consecutive rounds unchanged
with every guide present.

The matching itself is a greedy seed polished by exhaustive 2-swap and
3-cycle improvement until no strict improvement remains. Both phases order
candidates by (cost, guide id, task index), so the result depends only on the
table contents, never on arrival order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from itertools import combinations, permutations

from swarmherd.geometry import CenterOfMassEstimate, RobotState, Vec2

_WIRE = struct.Struct("<IHd")  # guide id u32, task index u16, cost f64, little-endian

ORACLE_MAX_N = 8


@dataclass(frozen=True)
class AllocationDigest:
    """One or more guides' complete cost rows, in guide-id order."""

    rows: tuple[tuple[int, tuple[float, ...]], ...]

    def to_bytes(self) -> bytes:
        out = bytearray()
        for guide_id, costs in self.rows:
            for task_index, cost in enumerate(costs):
                out += _WIRE.pack(guide_id, task_index, cost)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AllocationDigest":
        if len(data) % _WIRE.size != 0:
            raise ValueError("allocation digest length is not a whole number of entries")
        rows: dict[int, dict[int, float]] = {}
        for offset in range(0, len(data), _WIRE.size):
            guide_id, task_index, cost = _WIRE.unpack_from(data, offset)
            rows.setdefault(guide_id, {})[task_index] = cost
        packed = []
        for guide_id in sorted(rows):
            tasks = rows[guide_id]
            if sorted(tasks) != list(range(len(tasks))):
                raise ValueError(f"guide {guide_id} row has gaps in task indices")
            packed.append((guide_id, tuple(tasks[i] for i in range(len(tasks)))))
        return cls(rows=tuple(packed))

    @classmethod
    def single(cls, guide_id: int, costs: tuple[float, ...]) -> "AllocationDigest":
        return cls(rows=((guide_id, costs),))


@dataclass(frozen=True)
class AllocationState:
    """One guide's view of the auction: collected rows, current matching,
    and how many consecutive rounds that matching has held."""

    bids: dict[int, tuple[float, ...]] = field(default_factory=dict)
    assignment: dict[int, int] = field(default_factory=dict)
    stable_rounds: int = 0


def compute_costs(
    self_state: RobotState,
    com: CenterOfMassEstimate,
    station_angles: tuple[float, ...],
    station_distances: tuple[float, ...],
) -> tuple[float, ...]:
    """Distance from this guide to each candidate station point.

    Stations live around the perceived worker COM: station j sits at the COM
    offset plus ``station_distances[j]`` along ``station_angles[j]``. With no
    workers in range there is no COM and no bid; the caller defers.
    """
    if not com.defined:
        raise ValueError("cost row needs a worker COM estimate; none is in range")
    if len(station_angles) != len(station_distances):
        raise ValueError("station angle and distance lists differ in length")
    off = com.offset
    costs = []
    for theta, dist in zip(station_angles, station_distances):
        to_station = Vec2(off.x + dist * math.cos(theta), off.y + dist * math.sin(theta))
        costs.append(to_station.norm())
    return tuple(costs)


def _greedy_seed(bids: dict[int, tuple[float, ...]], n_tasks: int) -> dict[int, int]:
    triples = sorted(
        (costs[t], g, t)
        for g, costs in bids.items()
        for t in range(n_tasks)
    )
    assignment: dict[int, int] = {}
    taken: set[int] = set()
    for cost, g, t in triples:
        if g in assignment or t in taken:
            continue
        assignment[g] = t
        taken.add(t)
        if len(assignment) == len(bids):
            break
    return assignment

def _refine(bids: dict[int, tuple[float, ...]], assignment: dict[int, int], n_tasks: int) -> dict[int, int]:
    """Apply strict-improvement 2-swaps and 3-cycles until a fixpoint.

    Each pass scans guide pairs/triples in sorted-id order and applies the
    first strictly improving exchange, so the fixpoint is a pure function of
    the bid table. Bounded: total cost strictly decreases over a finite set
    of assignments.
    """
    guides = sorted(assignment)
    free = set(range(n_tasks)) - set(assignment.values())
    improved = True
    while improved:
        improved = False
        for g in guides:
            row = bids[g]
            t = assignment[g]
            for f in sorted(free):
                if f in free and row[f] < row[t] - 1e-12:
                    assignment[g] = f
                    free.discard(f)
                    free.add(t)
                    improved = True
                    t = f
        for ga, gb in combinations(guides, 2):
            ta, tb = assignment[ga], assignment[gb]
            if bids[ga][tb] + bids[gb][ta] < bids[ga][ta] + bids[gb][tb] - 1e-12:
                assignment[ga], assignment[gb] = tb, ta
                improved = True
        for ga, gb, gc in combinations(guides, 3):
            ta, tb, tc = assignment[ga], assignment[gb], assignment[gc]
            base = bids[ga][ta] + bids[gb][tb] + bids[gc][tc]
            if bids[ga][tb] + bids[gb][tc] + bids[gc][ta] < base - 1e-12:
                assignment[ga], assignment[gb], assignment[gc] = tb, tc, ta
                improved = True
            elif bids[ga][tc] + bids[gb][ta] + bids[gc][tb] < base - 1e-12:
                assignment[ga], assignment[gb], assignment[gc] = tc, ta, tb
                improved = True
    return assignment


def match_bids(bids: dict[int, tuple[float, ...]], n_tasks: int) -> dict[int, int]:
    """Deterministic injective matching of guides to tasks."""
    if not bids:
        return {}
    if any(len(costs) != n_tasks for costs in bids.values()):
        raise ValueError("bid rows disagree with the task count")
    if len(bids) > n_tasks:
        raise ValueError("more guides than tasks")
    seed = _greedy_seed(bids, n_tasks)
    return _refine(bids, seed, n_tasks)


def consensus_round(
    self_id: int,
    local: AllocationState,
    inbox: list[AllocationDigest],
    n_tasks: int,
) -> tuple[AllocationState, AllocationDigest]:
    """Fold received rows into the bid table, re-run the matching, and emit
    this guide's view for rebroadcast.

    A guide's own row is authoritative for its id; otherwise the first copy
    seen wins (rows are frozen, so copies only differ if a sender is faulty).
    """
    bids = dict(local.bids)
    for digest in inbox:
        for guide_id, costs in digest.rows:
            if guide_id == self_id and self_id in bids:
                continue
            if guide_id not in bids:
                bids[guide_id] = costs
    assignment = match_bids(bids, n_tasks)
    stable = local.stable_rounds + 1 if assignment == local.assignment and assignment else 0
    out = AllocationDigest(rows=tuple((g, bids[g]) for g in sorted(bids)))
    return AllocationState(bids=bids, assignment=assignment, stable_rounds=stable), out


def allocation_done(state: AllocationState, guide_roster: tuple[int, ...], quorum_rounds: int = 3) -> bool:
    """Done once every guide's row is present, the matching covers them all,
    and it has been identical for ``quorum_rounds`` consecutive rounds."""
    if set(state.bids) != set(guide_roster):
        return False
    if set(state.assignment) != set(guide_roster):
        return False
    return state.stable_rounds >= quorum_rounds


def oracle_optimal_assignment(costs: list[list[float]]) -> tuple[dict[int, int], float]:
    """Exhaustive minimum-cost matching, for auditing small instances only.

    Rows are guides, columns are tasks, n_rows <= n_cols <= 8. Refuses larger
    inputs rather than silently approximating.
    """
    n_rows = len(costs)
    if n_rows == 0:
        return {}, 0.0
    n_cols = len(costs[0])
    if any(len(row) != n_cols for row in costs):
        raise ValueError("cost matrix is ragged")
    if n_rows > n_cols:
        raise ValueError("more guides than tasks")
    if n_cols > ORACLE_MAX_N:
        raise ValueError(f"oracle is exhaustive and refuses n > {ORACLE_MAX_N}")
    best: tuple[int, ...] | None = None
    best_total = math.inf
    for perm in permutations(range(n_cols), n_rows):
        total = sum(costs[i][perm[i]] for i in range(n_rows))
        if total < best_total - 1e-15:
            best_total = total
            best = perm
    assert best is not None
    return {i: best[i] for i in range(n_rows)}, best_total
