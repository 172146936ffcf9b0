"""Deterministic discrete-event network.

One global priority queue ordered by (time, sequence number); identical
seeds produce identical traces, which a running digest makes cheap to
compare. Link policies add base latency plus seeded jitter and model
jamming, partitions, and in-transit payload mutation. Mutation hooks see
only serialized payload bytes, so they can fabricate exactly what a real
network attacker could and nothing more.
"""

from __future__ import annotations

import hashlib
import heapq
import struct
from dataclasses import dataclass, field
from random import Random
from typing import Callable, Protocol


class SchedulingError(ValueError):
    pass


class LivelockError(RuntimeError):
    """The event loop stopped advancing simulated time."""


class WireMessage(Protocol):
    """Payloads that expose a byte encoding are eligible for in-transit
    mutation; everything else passes through links untouched."""

    def to_wire(self) -> bytes: ...

    @classmethod
    def from_wire(cls, data: bytes) -> "WireMessage | None": ...


@dataclass(slots=True)
class Event:
    time: float
    seq: int
    source: str
    dest: str
    payload: object


@dataclass(slots=True)
class LinkPolicy:
    base_latency: float = 0.005
    jitter: float = 0.0
    jam_until: float | None = None
    jam_mode: str = "hold"  # "hold" delays to jam end; "drop" discards
    mutate: Callable[[bytes], bytes] | None = None


@dataclass(slots=True)
class Partition:
    """Node split in force until ``until``; cross-group traffic is dropped.
    Partitions always heal: ``until`` is mandatory."""

    groups: tuple[frozenset[str], ...]
    until: float

    def severed(self, a: str, b: str) -> bool:
        ga = gb = None
        for i, group in enumerate(self.groups):
            if a in group:
                ga = i
            if b in group:
                gb = i
        return ga is not None and gb is not None and ga != gb


class Simulation:
    def __init__(self, seed: int = 0, default_policy: LinkPolicy | None = None):
        self.now = 0.0
        self.rng = Random(seed)
        self.default_policy = default_policy or LinkPolicy()
        self.link_policies: dict[tuple[str, str], LinkPolicy] = {}
        self.partitions: list[Partition] = []
        self.handlers: dict[str, Callable[["Simulation", Event], None]] = {}
        self._queue: list[tuple[float, int, Event]] = []
        self._seq = 0
        self._trace = hashlib.sha256()
        self.delivered = 0
        self.dropped = 0
        self.mutated = 0
        self.livelock_budget = 200_000
        self._stale_steps = 0

    def register(self, actor_id: str, handler: Callable[["Simulation", Event], None]) -> None:
        self.handlers[actor_id] = handler

    def policy_for(self, source: str, dest: str) -> LinkPolicy:
        return self.link_policies.get((source, dest), self.default_policy)

    def set_link_policy(self, source: str, dest: str, policy: LinkPolicy) -> None:
        self.link_policies[(source, dest)] = policy

    def schedule(self, time: float, source: str, dest: str, payload: object) -> None:
        """Queue an event for delivery; time must not precede now."""
        if time < self.now:
            raise SchedulingError(f"cannot schedule at {time} before now={self.now}")
        self._seq += 1
        heapq.heappush(self._queue, (time, self._seq, Event(time, self._seq, source, dest, payload)))

    def schedule_self(self, actor_id: str, delay: float, payload: object) -> None:
        """Actor-local timer; bypasses link policies."""
        self.schedule(self.now + delay, actor_id, actor_id, payload)

    def send(self, source: str, dest: str, payload: object) -> None:
        """Send through the link: applies partitions, jamming, latency,
        jitter, and any mutation hook, in that order."""
        for partition in self.partitions:
            if self.now < partition.until and partition.severed(source, dest):
                self.dropped += 1
                return
        policy = self.policy_for(source, dest)
        depart = self.now
        if policy.jam_until is not None and self.now < policy.jam_until:
            if policy.jam_mode == "drop":
                self.dropped += 1
                return
            depart = policy.jam_until
        latency = policy.base_latency
        if policy.jitter:
            latency += policy.jitter * self.rng.random()
        if policy.mutate is not None and hasattr(payload, "to_wire"):
            mutated = policy.mutate(payload.to_wire())
            payload = type(payload).from_wire(mutated)
            self.mutated += 1
            if payload is None:
                self.dropped += 1  # mutation destroyed the framing
                return
        self.schedule(depart + latency, source, dest, payload)

    def broadcast(self, source: str, dests, payload: object) -> None:
        for dest in dests:
            if dest != source:
                self.send(source, dest, payload)

    def run_until(self, time_limit: float | None = None) -> None:
        """Process events in order until the limit or quiescence.

        Raises LivelockError when the configured number of consecutive
        events fails to advance simulated time.
        """
        while self._queue:
            if time_limit is not None and self._queue[0][0] > time_limit:
                break
            _, _, event = heapq.heappop(self._queue)
            if event.time > self.now:
                self.now = event.time
                self._stale_steps = 0
            else:
                self._stale_steps += 1
                if self._stale_steps > self.livelock_budget:
                    raise LivelockError(
                        f"{self._stale_steps} events at t={self.now} without progress; "
                        f"last event {event.source}->{event.dest} "
                        f"{type(event.payload).__name__}"
                    )
            self._trace.update(
                struct.pack(">dI", event.time, event.seq % (1 << 32))
                + event.dest.encode()
                + type(event.payload).__name__.encode()
            )
            self.delivered += 1
            handler = self.handlers.get(event.dest)
            if handler is not None:
                handler(self, event)
        if time_limit is not None and time_limit > self.now:
            self.now = time_limit

    @property
    def pending(self) -> int:
        return len(self._queue)

    def trace_digest(self) -> str:
        return self._trace.hexdigest()
