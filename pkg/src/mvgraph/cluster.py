"""Cluster plumbing: topology config, envelopes, timestamp oracle, transports.

Two runtimes sit behind one envelope-passing interface.  The simulation
runtime runs every shard in one process under a virtual-time scheduler:
message delivery order is the only source of interleaving, delays carry
seeded jitter (FIFO preserved per sender/receiver pair), and each shard
models a service time per envelope so background work (GC) visibly competes
with transaction traffic.  Identical seeds yield identical histories.  The
TCP runtime (see tcp module) drives the same engine with real sockets.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .common import TS_POS_INF, Timestamp, TxnId

# Message types.
STEP_DISPATCH = "StepDispatch"
STEP_RESULT = "StepResult"
STATUS_UPDATE = "StatusUpdate"
RCT_QUERY = "RctQuery"
RCT_REPLY = "RctReply"
RCT_INSERT = "RctInsert"
TS_PROBE = "TsProbe"
TS_REPLY = "TsReply"
CLIENT_REQUEST = "ClientRequest"
CLIENT_REPLY = "ClientReply"

CLIENT_NODE = -1


@dataclass
class ClusterConfig:
    shards: int = 1
    mode: str = "sim"                  # "sim" | "tcp"
    workers: int = 4
    seed: int = 0
    row_cells: int = 8
    optimistic: bool = True
    addresses: list[str] = field(default_factory=list)
    gc_enabled: bool = True
    gc_period_ms: int = 100
    gc_threads: int = 2
    gc_batch_versions: int = 1024
    gc_batch_rows: int = 256
    gc_batch_rct: int = 4096
    pool_capacity: Optional[dict] = None
    # Dependency-wait policy: poll interval and round budget.
    dep_wait_us: int = 10_000
    dep_rounds: int = 50

    def __post_init__(self):
        if self.shards < 1:
            raise ValueError("shard count must be >= 1")


@dataclass(slots=True)
class Envelope:
    type: str
    txid: Optional[TxnId]
    sender: int
    dest: int
    payload: dict
    clock: int = 0
    req_id: Optional[int] = None
    reply_to: Optional[int] = None


class TimestampOracle:
    """Per-shard Lamport clock plus the shard's active begin-timestamp set."""

    def __init__(self, shard: int):
        self.shard = shard
        self.counter = 1  # bulk-load data commits at counter 1
        self.active: set[Timestamp] = set()

    def next_timestamp(self) -> Timestamp:
        self.counter += 1
        return Timestamp(self.counter, self.shard)

    def observe(self, counter: int) -> None:
        if counter >= self.counter:
            self.counter = counter + 1

    def floor(self) -> Timestamp:
        """A lower bound below every timestamp this shard can still issue."""
        return Timestamp(self.counter + 1, self.shard)

    def register(self, bt: Timestamp) -> None:
        self.active.add(bt)

    def deregister(self, bt: Timestamp) -> None:
        self.active.discard(bt)

    def min_active(self) -> Optional[Timestamp]:
        return min(self.active) if self.active else None

    def max_active(self) -> Optional[Timestamp]:
        return max(self.active) if self.active else None


def assign_coordinator(counter: int, shards: int) -> int:
    """Round-robin client request assignment."""
    return counter % shards


# Task effects: coordinator logic and client sessions are generators that
# yield these; the runtime resumes them with the reply payload(s).
@dataclass(slots=True)
class Sleep:
    us: int


@dataclass(slots=True)
class Request:
    dest: int
    mtype: str
    payload: dict
    txid: Optional[TxnId] = None
    sender: int = CLIENT_NODE
    clock: int = 0


@dataclass(slots=True)
class RequestAll:
    requests: list  # of Request


class CostModel:
    """Virtual service time (microseconds) a shard spends per envelope."""

    LINK_LOCAL = 2
    LINK_REMOTE = 15
    LINK_CLIENT = 25
    JITTER = 6

    BASE = {
        STEP_DISPATCH: 10,
        STATUS_UPDATE: 1,
        RCT_QUERY: 4,
        RCT_INSERT: 4,
        TS_PROBE: 2,
        CLIENT_REQUEST: 5,
    }

    @classmethod
    def service(cls, env: Envelope) -> int:
        base = cls.BASE.get(env.type, 2)
        items = env.payload.get("items")
        if isinstance(items, list):
            base += 2 * len(items)
        batch = env.payload.get("batch")
        if isinstance(batch, list):
            base += len(batch)
        return base


class SimRuntime:
    """Single-process deterministic scheduler over virtual microseconds."""

    def __init__(self, seed: int = 0):
        self.now = 0
        self._heap: list = []
        self._seq = itertools.count()
        self.rng = random.Random(f"sim:{seed}")
        self._busy_until: dict[int, int] = {}
        self._pair_last: dict[tuple[int, int], int] = {}
        self._handlers: dict[int, Callable[[Envelope], None]] = {}
        self._tasks: dict[int, object] = {}       # req_id -> parked generator
        self._gather: dict[int, list] = {}        # req_id -> [slots, replies...]
        self._next_req = itertools.count(1)
        self.trace_messages: Optional[list] = None  # (sender, clock, dest) causality log

    # -- wiring ---------------------------------------------------------------

    def register_handler(self, node: int, fn: Callable[[Envelope], None]) -> None:
        self._handlers[node] = fn

    # -- event loop -----------------------------------------------------------

    def post(self, dt_us: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (self.now + dt_us, next(self._seq), fn))

    def run(self, until_us: Optional[int] = None,
            stop_when: Optional[Callable[[], bool]] = None) -> None:
        while self._heap:
            if stop_when is not None and stop_when():
                return
            t, _, fn = self._heap[0]
            if until_us is not None and t > until_us:
                break
            heapq.heappop(self._heap)
            self.now = t
            fn()
        if until_us is not None and self.now < until_us:
            self.now = until_us

    def pending(self) -> int:
        return len(self._heap)

    def occupy(self, node: int, cost_us: int) -> None:
        """Charge background work against a shard's service time."""
        self._busy_until[node] = max(self.now, self._busy_until.get(node, 0)) + cost_us

    # -- messaging --------------------------------------------------------------

    def _link_delay(self, sender: int, dest: int) -> int:
        if sender == CLIENT_NODE or dest == CLIENT_NODE:
            base = CostModel.LINK_CLIENT
        elif sender == dest:
            base = CostModel.LINK_LOCAL
        else:
            base = CostModel.LINK_REMOTE
        return base + self.rng.randrange(CostModel.JITTER)

    def send(self, env: Envelope) -> None:
        """Schedule delivery; FIFO per (sender, dest), shard busy time respected."""
        key = (env.sender, env.dest)
        at = self.now + self._link_delay(env.sender, env.dest)
        last = self._pair_last.get(key, 0)
        if at <= last:
            at = last + 1
        self._pair_last[key] = at
        if self.trace_messages is not None:
            self.trace_messages.append((env.sender, env.clock, env.dest, env.type))
        heapq.heappush(self._heap, (at, next(self._seq), lambda: self._deliver(env)))

    def _deliver(self, env: Envelope) -> None:
        if env.dest != CLIENT_NODE:
            start = max(self.now, self._busy_until.get(env.dest, 0))
            finish = start + CostModel.service(env)
            self._busy_until[env.dest] = finish
            if finish > self.now:
                heapq.heappush(self._heap, (finish, next(self._seq),
                                            lambda: self._dispatch(env)))
                return
        self._dispatch(env)

    def _dispatch(self, env: Envelope) -> None:
        if env.reply_to is not None:
            self._resume_reply(env)
            return
        handler = self._handlers.get(env.dest)
        if handler is None:
            raise RuntimeError(f"no handler for node {env.dest}")
        handler(env)

    # -- task management ----------------------------------------------------------

    def spawn(self, gen, value=None) -> None:
        self._advance(gen, value)

    def _advance(self, gen, value) -> None:
        try:
            eff = gen.send(value)
        except StopIteration:
            return
        if isinstance(eff, Sleep):
            self.post(eff.us, lambda: self._advance(gen, None))
        elif isinstance(eff, Request):
            rid = self._issue(eff, gen, None)
        elif isinstance(eff, RequestAll):
            if not eff.requests:
                self.post(0, lambda: self._advance(gen, []))
                return
            state = [len(eff.requests), [None] * len(eff.requests), gen]
            for i, req in enumerate(eff.requests):
                self._issue(req, None, (state, i))
        else:
            raise RuntimeError(f"unknown effect {eff!r}")

    def _issue(self, req: Request, gen, gather_slot) -> int:
        rid = next(self._next_req)
        if gen is not None:
            self._tasks[rid] = gen
        else:
            self._gather[rid] = gather_slot
        env = Envelope(req.mtype, req.txid, req.sender, req.dest, req.payload,
                       req.clock, req_id=rid)
        self.send(env)
        return rid

    def _resume_reply(self, env: Envelope) -> None:
        rid = env.reply_to
        gen = self._tasks.pop(rid, None)
        if gen is not None:
            self._advance(gen, env)
            return
        slot = self._gather.pop(rid, None)
        if slot is None:
            raise RuntimeError(f"reply for unknown request {rid}")
        state, i = slot
        state[1][i] = env
        state[0] -= 1
        if state[0] == 0:
            self._advance(state[2], state[1])
