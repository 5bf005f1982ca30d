"""Transaction-side state: status table, recent-committed table, read/write sets.

The shared tables here (TST, RCT) drive validation.  Every shard holds a TST
replica entry for each transaction it participates in; statuses converge to
the coordinator's value through status broadcasts.  The RCT is commit-time
ordered and range-queried over (bt, ct] during validation.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .common import (
    AbortError,
    AbortReason,
    GlobalId,
    InvariantError,
    Timestamp,
    TxnId,
)


class TxnStatus(enum.IntEnum):
    """2-bit transaction status; a global flag replicated across shards."""

    EXECUTION = 0
    VALIDATION = 1
    COMMIT = 2
    ABORT = 3


_LEGAL = {
    (TxnStatus.EXECUTION, TxnStatus.VALIDATION),
    (TxnStatus.EXECUTION, TxnStatus.ABORT),
    (TxnStatus.VALIDATION, TxnStatus.COMMIT),
    (TxnStatus.VALIDATION, TxnStatus.ABORT),
    # Composite of legal transitions: replicas may observe a coalesced
    # broadcast that skips the validation state.
    (TxnStatus.EXECUTION, TxnStatus.COMMIT),
}


class Isolation(enum.Enum):
    SR = "SR"
    SI = "SI"


@dataclass(slots=True)
class TstEntry:
    status: TxnStatus
    bt: Timestamp
    ct: Optional[Timestamp] = None


class TST:
    """Per-shard transaction status table.

    Entries are written by the local engine thread only; updates for remote
    transactions arrive as status broadcasts.  Transitions must follow the
    legal lifecycle (Execution -> Validation|Abort, Validation -> Commit|Abort).
    """

    def __init__(self, shard: int):
        self.shard = shard
        self.entries: dict[TxnId, TstEntry] = {}

    def ensure(self, txid: TxnId, bt: Timestamp) -> TstEntry:
        entry = self.entries.get(txid)
        if entry is None:
            entry = TstEntry(TxnStatus.EXECUTION, bt)
            self.entries[txid] = entry
        return entry

    def probe(self, txid: TxnId) -> tuple[TxnStatus, Optional[Timestamp]]:
        entry = self.entries.get(txid)
        if entry is None:
            raise InvariantError(f"status probe for unknown txn {txid} on shard {self.shard}")
        return entry.status, entry.ct

    def update(self, txid: TxnId, status: TxnStatus, bt: Timestamp,
               ct: Optional[Timestamp] = None) -> None:
        entry = self.ensure(txid, bt)
        if entry.status == status:
            if ct is not None:
                entry.ct = ct
            return
        if (entry.status, status) not in _LEGAL:
            raise InvariantError(
                f"illegal status transition {entry.status.name} -> {status.name} for {txid}")
        entry.status = status
        if ct is not None:
            entry.ct = ct

    def drop(self, txid: TxnId) -> None:
        self.entries.pop(txid, None)


# Read/write-set items.  The first four variants are the core footprint; the
# predicate variants cover phantoms on table scans and index lookups (an
# equality-predicate read conflicts with any write that moves an element in
# or out of the matching set).
def item_prop(chain_gid: GlobalId) -> tuple:
    return ("prop", chain_gid)


def item_vertex(gid: GlobalId) -> tuple:
    return ("vexist", gid)


def item_edge(gid: GlobalId) -> tuple:
    return ("eexist", gid)


def item_adjacency(vertex_gid: GlobalId, direction: int) -> tuple:
    return ("adj", vertex_gid, direction)


def item_prop_pred(kind: int, key_id: int, value) -> tuple:
    return ("pred", kind, key_id, _pred_value(value))


def item_label_pred(kind: int, label_id: int) -> tuple:
    return ("lpred", kind, label_id)


def item_table_scan(kind: int) -> tuple:
    return ("tscan", kind)


def _pred_value(value):
    # bool hashes equal to int in Python; widen with the tag so True != 1.
    if isinstance(value, bool):
        return ("b", value)
    return value


@dataclass(slots=True)
class RctEntry:
    """One recent-committed-table record: a transaction's shard-local write set.

    Provisional (final=False) entries belong to transactions still validating;
    they become final at commit or are removed at abort.
    """

    ct: Timestamp
    txid: TxnId
    items: frozenset
    final: bool = False
    fenced: bool = False


class RCT:
    """Commit-time-ordered table of recent write sets (one per shard).

    Backed by a sorted key list with bisect; mutated only by the owning shard
    engine.  `scan_fence` records the highest validation-scan upper bound so a
    provisional insert arriving behind an already-executed scan that should
    have seen it can be rejected (the inserter aborts).
    """

    def __init__(self, shard: int):
        self.shard = shard
        self._keys: list[Timestamp] = []
        self._entries: dict[Timestamp, RctEntry] = {}
        self.scan_fence: Timestamp | None = None

    def __len__(self) -> int:
        return len(self._keys)

    def insert_provisional(self, ct: Timestamp, txid: TxnId, items: Iterable[tuple]) -> RctEntry:
        if ct in self._entries:
            raise InvariantError(f"duplicate RCT key {ct}")
        entry = RctEntry(ct, txid, frozenset(items))
        if self.scan_fence is not None and ct <= self.scan_fence:
            entry.fenced = True
        bisect.insort(self._keys, ct)
        self._entries[ct] = entry
        return entry

    def has(self, ct: Timestamp) -> bool:
        return ct in self._entries

    def mark_final(self, ct: Timestamp) -> None:
        entry = self._entries.get(ct)
        if entry is None:
            raise InvariantError(f"finalizing missing RCT entry at {ct}")
        entry.final = True

    def remove(self, ct: Timestamp) -> None:
        if ct in self._entries:
            del self._entries[ct]
            idx = bisect.bisect_left(self._keys, ct)
            del self._keys[idx]

    def range_query(self, lo_exclusive: Timestamp, hi_inclusive: Timestamp) -> list[RctEntry]:
        """Entries with lo < ct <= hi, in commit-time order."""
        lo_idx = bisect.bisect_right(self._keys, lo_exclusive)
        hi_idx = bisect.bisect_right(self._keys, hi_inclusive)
        return [self._entries[k] for k in self._keys[lo_idx:hi_idx]]

    def bump_fence(self, hi: Timestamp) -> None:
        if self.scan_fence is None or hi > self.scan_fence:
            self.scan_fence = hi

    def prune_below(self, horizon: Timestamp) -> int:
        """Drop final entries with ct < horizon; provisional ones always stay."""
        removed = 0
        keep_keys = []
        for k in self._keys:
            entry = self._entries[k]
            if k < horizon and entry.final:
                del self._entries[k]
                removed += 1
            else:
                keep_keys.append(k)
        self._keys = keep_keys
        return removed


@dataclass
class ShardTxnState:
    """Per-shard fragment of one transaction's read/write bookkeeping.

    Read entries map item -> (logged value, provenance writer or None); the
    provenance marks reads satisfied by that writer's own version, which a
    validation overlap with the same writer must not count as a conflict.
    """

    reads: dict = field(default_factory=dict)
    write_items: set = field(default_factory=set)
    write_log: list = field(default_factory=list)      # semantic records for the history log
    pending_chains: list = field(default_factory=list)  # (chain, kind) for finalize
    pending_headers: list = field(default_factory=list)
    index_updates: list = field(default_factory=list)

    def record_read(self, item: tuple, value, prov: TxnId | None = None,
                    meta=None) -> None:
        if item not in self.reads:
            self.reads[item] = (value, prov, meta)

    def record_write(self, item: tuple) -> None:
        self.write_items.add(item)


class TxnCtx:
    """Coordinator-held transaction context."""

    def __init__(self, txid: TxnId, isolation: Isolation, bt: Timestamp,
                 coordinator: int, read_only_hint: bool = False):
        self.txid = txid
        self.isolation = isolation
        self.bt = bt
        self.ct: Optional[Timestamp] = None
        self.coordinator = coordinator
        self.read_only = read_only_hint
        self.participants: set[int] = {coordinator}
        self.commit_deps: set[TxnId] = set()
        self.abort_deps: set[TxnId] = set()
        self.write_shards: set[int] = set()
        self.read_shards: set[int] = set()
        self.status = TxnStatus.EXECUTION
        self.decided: Optional[bool] = None  # True committed / False aborted
        self.abort_reason: Optional[AbortReason] = None

    def add_commit_dep(self, txid: TxnId) -> None:
        if txid != self.txid:
            self.commit_deps.add(txid)

    def add_abort_dep(self, txid: TxnId) -> None:
        if txid != self.txid:
            self.abort_deps.add(txid)

    def deps_disjoint(self) -> bool:
        return not (self.commit_deps & self.abort_deps)


def check_conflicts(entry: RctEntry, reads: dict) -> list[tuple]:
    """Items of one RCT entry that invalidate this read set.

    A read whose provenance is the entry's own writer consumed that writer's
    version already and stays consistent if the writer commits, so it is
    skipped here; the commit dependency machinery enforces the rest.
    """
    conflicts = []
    for item in entry.items:
        got = reads.get(item)
        if got is None:
            continue
        if got[1] == entry.txid:
            continue
        conflicts.append(item)
    return conflicts
