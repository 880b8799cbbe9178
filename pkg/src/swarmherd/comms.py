"""Situated broadcast, virtual stigmergy, and the stigmergy-backed barrier.

The stigmergy store is a per-robot replica of a key-value map. Writes bump a
per-key Lamport version; replicas exchange full-store digests and keep, per
key, the entry with the higher (version, writer) pair. That merge is
commutative, associative, and idempotent, so replicas converge regardless of
message ordering on any connected communication graph.

Barriers ride on top: each guide posts ``b.<state>.<id>`` and releases once
its own replica holds an entry for every roster member. Release can never
happen before every member posted (the keys have no other source), but
different guides may observe release a few ticks apart while the last post
propagates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

from swarmherd.allocation import AllocationDigest
from swarmherd.geometry import RobotId, Vec2, angle_of

Value = Union[float, int, tuple]


@dataclass(frozen=True)
class StigmergyEntry:
    key: str
    value: Value
    version: int
    writer: int  # writer's robot id; ties broken toward the higher id


class StigmergyStore:
    """One robot's replica. ``revision`` bumps on every observable change,
    which is what the engine's change-gated gossip watches."""

    __slots__ = ("entries", "revision")

    def __init__(self) -> None:
        self.entries: dict[str, StigmergyEntry] = {}
        self.revision = 0

    def get(self, key: str, default: Value | None = None) -> Value | None:
        entry = self.entries.get(key)
        return entry.value if entry is not None else default

    def put(self, key: str, value: Value, writer: int) -> None:
        prev = self.entries.get(key)
        version = (prev.version if prev is not None else 0) + 1
        self.entries[key] = StigmergyEntry(key, value, version, writer)
        self.revision += 1

    def merge(self, remote: Iterable[StigmergyEntry]) -> bool:
        """Fold remote entries in; returns whether anything changed."""
        changed = False
        for entry in remote:
            local = self.entries.get(entry.key)
            if local is None or (entry.version, entry.writer) > (local.version, local.writer):
                self.entries[entry.key] = entry
                changed = True
        if changed:
            self.revision += 1
        return changed

    def digest(self) -> tuple[StigmergyEntry, ...]:
        """Full-store broadcast payload, in deterministic key order."""
        return tuple(self.entries[k] for k in sorted(self.entries))


def stigmergy_put(store: StigmergyStore, key: str, value: Value, self_id: RobotId | int) -> StigmergyStore:
    writer = self_id.id if isinstance(self_id, RobotId) else self_id
    store.put(key, value, writer)
    return store


def stigmergy_merge(store: StigmergyStore, remote_entries: Iterable[StigmergyEntry]) -> StigmergyStore:
    store.merge(remote_entries)
    return store


# --- key registry ------------------------------------------------------
# Worker-facing parameter keys. Guides write them, workers obey the merged
# values. Mode travels as the integer wire value of WorkerMode.

KEY_RHO = "w.rho"
KEY_FOV = "w.fov"
KEY_RFOV = "w.rfov"
KEY_MODE = "w.mode"

GCOM_PREFIX = "g.com"


def gcom_key(guide_id: int) -> str:
    """Key under which a guide shares its absolute worker-COM estimate."""
    return f"{GCOM_PREFIX}.{guide_id}"


BEARING_PREFIX = "g.brg"


def bearing_key(guide_id: int) -> str:
    """Key under which a guide shares its bearing about the worker COM."""
    return f"{BEARING_PREFIX}.{guide_id}"


# --- barrier -----------------------------------------------------------

BARRIER_PREFIX = "b"


def barrier_key(state_tag: str, guide_id: int) -> str:
    return f"{BARRIER_PREFIX}.{state_tag}.{guide_id}"


@dataclass(frozen=True)
class BarrierState:
    state_tag: str
    ready: frozenset[int]
    released: bool


def barrier_post(store: StigmergyStore, state_tag: str, self_id: RobotId | int) -> StigmergyStore:
    writer = self_id.id if isinstance(self_id, RobotId) else self_id
    store.put(barrier_key(state_tag, writer), 1, writer)
    return store


def barrier_state(store: StigmergyStore, state_tag: str, guide_roster: Iterable[int]) -> BarrierState:
    roster = tuple(guide_roster)
    ready = frozenset(g for g in roster if barrier_key(state_tag, g) in store.entries)
    return BarrierState(state_tag=state_tag, ready=ready, released=len(ready) == len(roster))


def barrier_check(store: StigmergyStore, state_tag: str, guide_roster: Iterable[int]) -> bool:
    """True iff this replica holds a post from every roster member."""
    return all(barrier_key(state_tag, g) in store.entries for g in guide_roster)


# --- situated messages -------------------------------------------------


@dataclass(frozen=True)
class Heartbeat:
    """Contentless presence beacon; receivers still learn relative position."""


@dataclass(frozen=True)
class StigmergyDigest:
    entries: tuple[StigmergyEntry, ...]


Payload = Union[StigmergyDigest, AllocationDigest, Heartbeat]


@dataclass(frozen=True)
class SituatedMessage:
    sender: RobotId
    sender_position_hint: Vec2
    payload: Payload


@dataclass(frozen=True)
class ReceivedMessage:
    """What a receiver sees: the sender's pose relative to itself, never
    absolute coordinates."""

    sender: RobotId
    relative_position: Vec2
    bearing: float
    payload: Payload


def payload_kind(payload: Payload) -> str:
    if isinstance(payload, StigmergyDigest):
        return "stigmergy"
    if isinstance(payload, AllocationDigest):
        return "allocation"
    return "heartbeat"


def deliver(
    tick: int,
    outboxes: list[list[SituatedMessage]],
    positions: list[Vec2],
    d_com: float,
    loss_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> list[list[ReceivedMessage]]:
    """Range-limited broadcast delivery for the next tick.

    Every message in robot s's outbox reaches each other robot within d_com
    of s (positions are the send-tick poses), independently dropped with
    probability ``loss_rate``. Senders and receivers are walked in id order,
    so loss draws are reproducible for a fixed generator.
    """
    if loss_rate > 0.0 and rng is None:
        raise ValueError("loss_rate > 0 requires an rng")
    n = len(positions)
    inboxes: list[list[ReceivedMessage]] = [[] for _ in range(n)]
    for s in range(n):
        box = outboxes[s]
        if not box:
            continue
        ps = positions[s]
        for r in range(n):
            if r == s:
                continue
            rel = ps - positions[r]
            dist = math.hypot(rel.x, rel.y)
            if dist > d_com:
                continue
            bearing = angle_of(rel) if dist > 0.0 else 0.0
            for msg in box:
                if loss_rate > 0.0 and rng.random() < loss_rate:
                    continue
                inboxes[r].append(
                    ReceivedMessage(
                        sender=msg.sender,
                        relative_position=rel,
                        bearing=bearing,
                        payload=msg.payload,
                    )
                )
    return inboxes
