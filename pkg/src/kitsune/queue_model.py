"""Ring-queue protocol: acquire/release state machine plus a model checker.

A queue is a depth-D ring of payload entries in L2 with sequence-number
metadata.  The single producer acquires write slots in sequence order; a
sequence's slot is writable only once every consumer has released the
sequence that previously occupied it (seq - D).  Each consumer acquires
sequences in order once published, holds up to D of them, and may release
out of order.  Acquire never blocks the caller here — it returns ``Blocked``
with the reason, and the simulator decides how to wait.

``check_queue`` exhaustively explores every interleaving of protocol
operations for small configurations, re-verifying the safety rules
independently of the queue's own gating so a broken implementation is
caught, and reporting any reachable deadlock with a full trace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from kitsune.errors import ProtocolError


@dataclass(frozen=True)
class Acquired:
    seq: int
    slot: int


@dataclass(frozen=True)
class Blocked:
    reason: str
    waiting_seq: int


class RingQueue:
    """Protocol state for one queue: one producer, ``consumers`` readers."""

    def __init__(self, depth: int = 2, consumers: int = 1, queue_id: str = "q"):
        if depth < 1:
            raise ProtocolError(f"queue '{queue_id}': depth must be at least 1")
        if consumers < 1:
            raise ProtocolError(f"queue '{queue_id}': needs at least one consumer")
        self.id = queue_id
        self.depth = depth
        self.n_consumers = consumers
        self.next_wr = 0
        self.holds_wr: set[int] = set()
        self.published: set[int] = set()
        self.next_rd = [0] * consumers
        self.holds_rd: list[set[int]] = [set() for _ in range(consumers)]
        self.released_rd: list[set[int]] = [set() for _ in range(consumers)]

    # -- producer side -------------------------------------------------------
    def wr_acquire(self) -> Acquired | Blocked:
        seq = self.next_wr
        prev = seq - self.depth
        if prev >= 0:
            for c in range(self.n_consumers):
                if prev not in self.released_rd[c]:
                    return Blocked(
                        reason=f"slot {seq % self.depth} still holds seq {prev} "
                        f"unreleased by consumer {c}",
                        waiting_seq=prev,
                    )
        self.holds_wr.add(seq)
        self.next_wr += 1
        return Acquired(seq=seq, slot=seq % self.depth)

    def wr_release(self, seq: int) -> None:
        if seq in self.published:
            raise ProtocolError(f"queue '{self.id}': double wr_release of seq {seq}")
        if seq not in self.holds_wr:
            raise ProtocolError(f"queue '{self.id}': wr_release of unacquired seq {seq}")
        self.holds_wr.discard(seq)
        self.published.add(seq)

    # -- consumer side -------------------------------------------------------
    def _check_consumer(self, consumer: int) -> None:
        if not 0 <= consumer < self.n_consumers:
            raise ProtocolError(
                f"queue '{self.id}': consumer index {consumer} out of range "
                f"(have {self.n_consumers})"
            )

    def rd_acquire(self, consumer: int) -> Acquired | Blocked:
        self._check_consumer(consumer)
        seq = self.next_rd[consumer]
        if seq not in self.published:
            return Blocked(reason=f"seq {seq} not yet published", waiting_seq=seq)
        self.holds_rd[consumer].add(seq)
        self.next_rd[consumer] += 1
        return Acquired(seq=seq, slot=seq % self.depth)

    def rd_release(self, consumer: int, seq: int) -> None:
        self._check_consumer(consumer)
        if seq in self.released_rd[consumer]:
            raise ProtocolError(
                f"queue '{self.id}': consumer {consumer} double rd_release of seq {seq}"
            )
        if seq not in self.holds_rd[consumer]:
            raise ProtocolError(
                f"queue '{self.id}': consumer {consumer} rd_release of unacquired seq {seq}"
            )
        self.holds_rd[consumer].discard(seq)
        self.released_rd[consumer].add(seq)

    # -- inspection ----------------------------------------------------------
    def can_wr_acquire(self) -> bool:
        prev = self.next_wr - self.depth
        return prev < 0 or all(prev in self.released_rd[c] for c in range(self.n_consumers))

    def can_rd_acquire(self, consumer: int) -> bool:
        return self.next_rd[consumer] in self.published

    def clone(self) -> "RingQueue":
        q = type(self).__new__(type(self))  # keep subclass behavior in the checker
        q.id = self.id
        q.depth = self.depth
        q.n_consumers = self.n_consumers
        q.next_wr = self.next_wr
        q.holds_wr = set(self.holds_wr)
        q.published = set(self.published)
        q.next_rd = list(self.next_rd)
        q.holds_rd = [set(s) for s in self.holds_rd]
        q.released_rd = [set(s) for s in self.released_rd]
        return q

    def state_key(self) -> tuple:
        return (
            self.next_wr,
            tuple(sorted(self.holds_wr)),
            tuple(sorted(self.published)),
            tuple(self.next_rd),
            tuple(tuple(sorted(s)) for s in self.holds_rd),
            tuple(tuple(sorted(s)) for s in self.released_rd),
        )


# ---------------------------------------------------------------------------
# exhaustive interleaving exploration
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    ok: bool
    states: int
    violation: str | None = None
    trace: list[dict] = field(default_factory=list)
    depth: int = 2
    consumers: int = 1
    items: int = 4

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "states_explored": self.states,
            "violation": self.violation,
            "config": {"depth": self.depth, "consumers": self.consumers, "items": self.items},
            "trace": self.trace,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def check_queue(
    depth: int = 2,
    consumers: int = 1,
    items: int = 4,
    queue_factory=RingQueue,
) -> CheckResult:
    """Explore every interleaving; verify safety independently; find deadlock.

    The producer acquires/releases sequences in order (one CTA writes its
    lane sequentially); consumers acquire in order but may release any held
    sequence, so all legal release orders are explored.
    """

    base = queue_factory(depth=depth, consumers=consumers, queue_id="checked")
    seen: set[tuple] = set()
    result = CheckResult(ok=True, states=0, depth=depth, consumers=consumers, items=items)

    def slot_conflict(q: RingQueue, seq: int) -> str | None:
        # independent safety oracle: the previous occupant of this slot must
        # have been released by every consumer before the grant
        prev = seq - depth
        if prev < 0:
            return None
        for c in range(consumers):
            if prev not in q.released_rd[c]:
                return (
                    f"overwrite hazard: wr_acquire granted seq {seq} while consumer {c} "
                    f"still holds the slot's previous seq {prev}"
                )
        return None

    def explore(q: RingQueue, path: list[dict]) -> bool:
        key = q.state_key()
        if key in seen:
            return True
        seen.add(key)
        result.states += 1

        done = (
            q.next_wr == items
            and not q.holds_wr
            and all(q.next_rd[c] == items and not q.holds_rd[c] for c in range(consumers))
        )
        if done:
            return True

        moves: list[tuple[dict, RingQueue]] = []

        if q.next_wr < items:
            probe = q.clone()
            got = probe.wr_acquire()
            if isinstance(got, Acquired):
                conflict = slot_conflict(q, got.seq)
                if conflict:
                    result.ok = False
                    result.violation = conflict
                    result.trace = path + [
                        {"actor": "producer", "op": "wr_acquire", "result": f"granted seq {got.seq}"}
                    ]
                    return False
                moves.append(
                    ({"actor": "producer", "op": "wr_acquire", "result": f"granted seq {got.seq}"}, probe)
                )
        if q.holds_wr:
            seq = min(q.holds_wr)  # single producer publishes in order
            probe = q.clone()
            probe.wr_release(seq)
            moves.append(
                ({"actor": "producer", "op": "wr_release", "result": f"published seq {seq}"}, probe)
            )
        for c in range(consumers):
            if q.next_rd[c] < items:
                probe = q.clone()
                got = probe.rd_acquire(c)
                if isinstance(got, Acquired):
                    if got.seq not in q.published:
                        result.ok = False
                        result.violation = (
                            f"read-before-publish: consumer {c} granted unpublished seq {got.seq}"
                        )
                        result.trace = path + [
                            {"actor": f"consumer{c}", "op": "rd_acquire", "result": f"granted seq {got.seq}"}
                        ]
                        return False
                    if got.seq != q.next_rd[c]:
                        result.ok = False
                        result.violation = (
                            f"out-of-order grant: consumer {c} expected seq {q.next_rd[c]}, "
                            f"got {got.seq}"
                        )
                        result.trace = path + [
                            {"actor": f"consumer{c}", "op": "rd_acquire", "result": f"granted seq {got.seq}"}
                        ]
                        return False
                    moves.append(
                        (
                            {"actor": f"consumer{c}", "op": "rd_acquire", "result": f"granted seq {got.seq}"},
                            probe,
                        )
                    )
            for seq in sorted(q.holds_rd[c]):  # any release order
                probe = q.clone()
                probe.rd_release(c, seq)
                moves.append(
                    (
                        {"actor": f"consumer{c}", "op": "rd_release", "result": f"released seq {seq}"},
                        probe,
                    )
                )

        if not moves:
            result.ok = False
            result.violation = "deadlock: no process can make progress"
            result.trace = list(path)
            return False

        for step, probe in moves:
            if len(probe.holds_wr) > depth or any(
                len(probe.holds_rd[c]) > depth for c in range(consumers)
            ):
                result.ok = False
                result.violation = "hold-count exceeded ring depth"
                result.trace = path + [step]
                return False
            if not explore(probe, path + [step]):
                return False
        return True

    explore(base, [])
    return result


def check_matrix(
    depths: tuple[int, ...] = (2, 3),
    consumer_counts: tuple[int, ...] = (1, 2),
    items: int = 6,
    queue_factory=RingQueue,
) -> list[CheckResult]:
    results = []
    for depth in depths:
        for consumers in consumer_counts:
            results.append(
                check_queue(depth=depth, consumers=consumers, items=items, queue_factory=queue_factory)
            )
    return results


# ---------------------------------------------------------------------------
# transfer cost model
# ---------------------------------------------------------------------------

HOP_ATOMICS = 4  # sequence-number atomics per queue hop (acquire + release)


@dataclass(frozen=True)
class QueueCost:
    """What one payload transfer costs on a given machine."""

    payload_bytes: int
    latency_s: float  # sync handshakes plus the payload's time on the wire
    queue_gbps: float  # one queue's sustainable bandwidth at this payload
    aggregate_gbps: float  # all active queues together, after caps
    spilled: bool  # combined footprint no longer fits pinned L2

    def to_dict(self) -> dict:
        return {
            "payload_bytes": self.payload_bytes,
            "latency_s": self.latency_s,
            "queue_gbps": round(self.queue_gbps, 6),
            "aggregate_gbps": round(self.aggregate_gbps, 6),
            "spilled": self.spilled,
        }


def queue_cost(payload_bytes: int, active_queues: int, machine, depth: int = 2) -> QueueCost:
    """Effective queue bandwidth and per-transfer latency for a payload size.

    Small payloads are dominated by the per-hop synchronization atomics, so
    the calibrated per-lane table already sags at the low end.  The aggregate
    is capped by the L2 queue-bandwidth budget, and once the combined ring
    footprint outgrows the pinned-L2 capacity, service degrades to a DRAM
    round trip shared by every queue.
    """

    if payload_bytes <= 0:
        raise ProtocolError(f"payload must be positive, got {payload_bytes}")
    if active_queues <= 0:
        raise ProtocolError(f"active_queues must be positive, got {active_queues}")
    lane = machine.lane_gbps(payload_bytes)
    aggregate = min(active_queues * lane, machine.aggregate_queue_gbps)
    spilled = active_queues * payload_bytes * depth > machine.l2_capacity_bytes
    if spilled:
        aggregate = min(aggregate, machine.dram_gbps)
    per_queue = min(lane, aggregate / active_queues)
    latency = HOP_ATOMICS / machine.atomics_per_s + payload_bytes / (per_queue * 1e9)
    return QueueCost(
        payload_bytes=payload_bytes,
        latency_s=latency,
        queue_gbps=per_queue,
        aggregate_gbps=aggregate,
        spilled=spilled,
    )
