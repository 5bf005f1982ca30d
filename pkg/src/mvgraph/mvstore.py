"""Multi-version property storage: tuple chains and the visibility rules.

A chain holds the versions of one property object, oldest first.  Committed
tuples tile time without overlap (each tuple's end time equals the next
tuple's begin time).  An in-flight writer is visible as a pair of transient
fields: the current version's end time and the new version's begin time both
hold the writer's transaction id until commit rewrites them to the commit
time, or abort marks the new version begin time as -Inf forever.

Readers resolve a transaction id found in a time field against the status
table.  For a serializable read-write reader the four outcomes are:

* writer in execution: read the current version; the read-set entry makes
  validation catch the writer if it commits inside the reader's window.
* writer in validation: optimistically pre-read the new version and record a
  commit dependency on the writer.
* writer committed (fields not yet rewritten): read the new version; the
  writer's commit time precedes the reader's.
* writer aborted: ignore the new version, read the current one.

Snapshot readers (SI, and read-only serializable transactions, which
serialize at their begin time) instead compare the writer's commit timestamp
against their own begin time, falling back to a commit dependency only when
a validating writer's commit time already precedes the snapshot.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

from .common import (
    TF_NEG_INF,
    TF_POS_INF,
    TOMBSTONE,
    AbortReason,
    GlobalId,
    InvariantError,
    TimeField,
    Timestamp,
    TxnId,
)
from .txn import TxnStatus

# Probe callback: TxnId -> (status, commit timestamp if assigned).
TstProbe = Callable[[TxnId], tuple[TxnStatus, Optional[Timestamp]]]


class ReadMode(enum.Enum):
    PAPER = "paper"        # serializable read-write rules (the four cases)
    SNAPSHOT = "snapshot"  # begin-time snapshot (SI / read-only SR)


class MVTuple:
    __slots__ = ("bt", "et", "value", "detached")

    def __init__(self, bt: TimeField, et: TimeField, value):
        self.bt = bt
        self.et = et
        self.value = value
        self.detached = False

    def __repr__(self):
        return f"MVTuple({self.bt!r}->{self.et!r}, {self.value!r})"


class VersionChain:
    """Ordered versions of one property object (oldest -> newest)."""

    __slots__ = ("owner", "tuples")

    def __init__(self, owner: GlobalId):
        self.owner = owner
        self.tuples: list[MVTuple] = []

    def __len__(self):
        return len(self.tuples)

    def pending(self) -> Optional[MVTuple]:
        """The uncommitted new version, if an install is in flight."""
        for t in reversed(self.tuples):
            if t.bt.is_txn:
                return t
        return None

    def newest_settled(self) -> Optional[MVTuple]:
        """Newest tuple that is neither pending nor permanently invisible."""
        for t in reversed(self.tuples):
            if t.bt.is_txn or t.bt.tag == TimeField.NEG_INF:
                continue
            return t
        return None

    def committed_triples(self) -> list[tuple]:
        """(bt, et, value) of committed tuples; equality basis for replay oracles."""
        out = []
        for t in self.tuples:
            if t.bt.is_commit:
                et = t.et.ts if t.et.is_commit else (None if t.et.is_txn else "inf")
                out.append((t.bt.ts, et, t.value))
        return out


@dataclass(slots=True)
class VersionRead:
    """Outcome of a visibility lookup.

    found/value carry the result; dep is a commit dependency on a validating
    writer; prov names the writer whose own version satisfied the read (the
    validation pass must not count an overlap with that writer as a conflict).
    """

    found: bool
    value: object = None
    dep: Optional[TxnId] = None
    prov: Optional[TxnId] = None
    abort: Optional[AbortReason] = None

    @property
    def must_abort(self) -> bool:
        return self.abort is not None


_NOT_FOUND = VersionRead(found=False)


def _result(value, dep=None, prov=None) -> VersionRead:
    if value is TOMBSTONE:
        return VersionRead(found=False, dep=dep, prov=prov)
    return VersionRead(found=True, value=value, dep=dep, prov=prov)


def get_visible_version(chain: VersionChain, reader_bt: Timestamp,
                        reader_txid: Optional[TxnId], tst_probe: TstProbe,
                        mode: ReadMode = ReadMode.PAPER,
                        optimistic: bool = True) -> VersionRead:
    """Resolve the version of `chain` visible to a reader.

    Visibility of a committed tuple is begin-inclusive, end-exclusive:
    bt <= reader_bt < et.  A reader always sees its own pending write.
    """
    pend = chain.pending()
    if pend is not None and reader_txid is not None and pend.bt.txn == reader_txid:
        return _result(pend.value)

    cur = None
    for t in reversed(chain.tuples):
        if t.bt.is_txn or t.bt.tag == TimeField.NEG_INF or t.detached:
            continue
        if t.bt.ts <= reader_bt:
            cur = t
            break

    if cur is None:
        if pend is None:
            return _NOT_FOUND
        # Fresh object: only an uncommitted creation exists.
        return _resolve_writer(None, pend, reader_bt, tst_probe, mode, optimistic)

    et = cur.et
    if et.tag == TimeField.POS_INF:
        return _result(cur.value)
    if et.is_commit:
        if reader_bt < et.ts:
            return _result(cur.value)
        raise InvariantError(
            f"chain {chain.owner}: no tuple covers bt {reader_bt} despite newer commits")
    return _resolve_writer(cur, pend, reader_bt, tst_probe, mode, optimistic)


def _resolve_writer(cur: Optional[MVTuple], pend: Optional[MVTuple],
                    reader_bt: Timestamp, tst_probe: TstProbe,
                    mode: ReadMode, optimistic: bool) -> VersionRead:
    """Apply the writer-status cases when a time field holds a TxnId."""
    if cur is not None:
        writer = cur.et.txn
    else:
        writer = pend.bt.txn
    status, ct = tst_probe(writer)

    def old() -> VersionRead:
        return _result(cur.value) if cur is not None else _NOT_FOUND

    def new(dep=None) -> VersionRead:
        if pend is None or pend.bt.txn != writer:
            raise InvariantError("locked tuple with no adjacent pending version")
        return _result(pend.value, dep=dep, prov=writer)

    if status == TxnStatus.ABORT:
        return old()
    if status == TxnStatus.COMMIT:
        if mode is ReadMode.SNAPSHOT:
            if ct is None:
                raise InvariantError("committed writer without commit timestamp")
            return new() if ct <= reader_bt else old()
        return new()
    # Writer unresolved (execution or validation).
    if mode is ReadMode.SNAPSHOT:
        if status == TxnStatus.VALIDATION and ct is not None and ct <= reader_bt:
            # The writer's versions already belong to this snapshot if it
            # commits; pre-read with a commit dependency (abort if it aborts).
            if not optimistic:
                return VersionRead(found=False, abort=AbortReason.PRE_READ)
            return new(dep=writer)
        return old()
    if not optimistic:
        return VersionRead(found=False, abort=AbortReason.PRE_READ)
    if status == TxnStatus.EXECUTION:
        return old()
    return new(dep=writer)


def resolve_existence(bt: TimeField, et: TimeField, reader_bt: Timestamp,
                      reader_txid: Optional[TxnId], tst_probe: TstProbe,
                      mode: ReadMode = ReadMode.PAPER,
                      optimistic: bool = True) -> VersionRead:
    """Visibility of a vertex/edge header, whose bt/et form a one-slot chain.

    `found` means the element is visible to the reader; dep/prov carry the
    same meaning as for property versions.
    """
    if et.is_txn and reader_txid is not None and et.txn == reader_txid:
        return _NOT_FOUND                      # deleted by this transaction
    if bt.is_txn:
        if reader_txid is not None and bt.txn == reader_txid:
            return VersionRead(found=True)     # created by this transaction
        if et.is_txn:
            return _NOT_FOUND                  # created and deleted in one flight
        writer = bt.txn
        status, ct = tst_probe(writer)
        if status == TxnStatus.ABORT:
            return _NOT_FOUND
        if status == TxnStatus.COMMIT:
            if mode is ReadMode.SNAPSHOT:
                ok = ct is not None and ct <= reader_bt
                return VersionRead(found=ok, prov=writer if ok else None)
            return VersionRead(found=True, prov=writer)
        if mode is ReadMode.SNAPSHOT:
            if status == TxnStatus.VALIDATION and ct is not None and ct <= reader_bt:
                if not optimistic:
                    return VersionRead(found=False, abort=AbortReason.PRE_READ)
                return VersionRead(found=True, dep=writer, prov=writer)
            return _NOT_FOUND
        if not optimistic:
            return VersionRead(found=False, abort=AbortReason.PRE_READ)
        if status == TxnStatus.EXECUTION:
            return _NOT_FOUND
        return VersionRead(found=True, dep=writer, prov=writer)

    if bt.tag == TimeField.NEG_INF:
        return _NOT_FOUND
    if bt.ts > reader_bt:
        return _NOT_FOUND
    if not et.is_txn:
        visible = reader_bt < et.bound()
        return VersionRead(found=visible)

    # Deletion in flight by another transaction.
    writer = et.txn
    status, ct = tst_probe(writer)
    if status == TxnStatus.ABORT:
        return VersionRead(found=True)
    if status == TxnStatus.COMMIT:
        if mode is ReadMode.SNAPSHOT:
            gone = ct is not None and ct <= reader_bt
            return VersionRead(found=not gone, prov=writer if gone else None)
        return VersionRead(found=False, prov=writer)
    if mode is ReadMode.SNAPSHOT:
        if status == TxnStatus.VALIDATION and ct is not None and ct <= reader_bt:
            if not optimistic:
                return VersionRead(found=False, abort=AbortReason.PRE_READ)
            return VersionRead(found=False, dep=writer, prov=writer)
        return VersionRead(found=True)
    if not optimistic:
        return VersionRead(found=False, abort=AbortReason.PRE_READ)
    if status == TxnStatus.EXECUTION:
        return VersionRead(found=True)
    return VersionRead(found=False, dep=writer, prov=writer)


def alloc_tuple(pool, bt: TimeField, et: TimeField, value) -> MVTuple:
    """Pool-accounted tuple allocation; resets a recycled tuple if one is reused."""
    t = pool.alloc("tuple", lambda: MVTuple(bt, et, value))
    t.bt, t.et, t.value, t.detached = bt, et, value, False
    return t


def install_pending_version(chain: VersionChain, writer: TxnId, value,
                            allow_ww: bool = False,
                            make_tuple: Callable = MVTuple) -> None:
    """Install a new pending version owned by `writer`.

    The end-time swap on the current version is the linearization point for
    write-write conflict detection: finding another transaction's id there
    aborts the caller immediately.  Re-installs by the same writer overwrite
    the pending value in place.  `allow_ww` exists only for fault-injection
    tests and clobbers a competing pending install.
    """
    from .common import AbortError  # local import keeps module deps one-way

    pend = chain.pending()
    if pend is not None:
        owner = pend.bt.txn
        if owner == writer:
            pend.value = value
            return
        if not allow_ww:
            raise AbortError(AbortReason.WW_CONFLICT, f"pending writer {owner}")
        pend.bt = TimeField.of_txn(writer)
        pend.value = value
        cur = chain.newest_settled()
        if cur is not None and cur.et.is_txn:
            cur.et = TimeField.of_txn(writer)
        return

    cur = chain.newest_settled()
    if cur is not None:
        if cur.et.is_txn:
            if not allow_ww:
                raise AbortError(AbortReason.WW_CONFLICT, f"locked by {cur.et.txn}")
        elif not (cur.et.tag == TimeField.POS_INF):
            raise InvariantError("newest settled tuple already superseded")
        cur.et = TimeField.of_txn(writer)
    chain.tuples.append(make_tuple(TimeField.of_txn(writer), TF_POS_INF, value))


def finalize_commit(chain: VersionChain, writer: TxnId, ct: Timestamp,
                    missing_ok: bool = False) -> None:
    """Rewrite the writer's transient fields to its commit time."""
    done = False
    for t in chain.tuples:
        if t.et.is_txn and t.et.txn == writer:
            t.et = TimeField.commit(ct)
            done = True
        if t.bt.is_txn and t.bt.txn == writer:
            t.bt = TimeField.commit(ct)
            done = True
    if not done and not missing_ok:
        raise InvariantError(f"double or stray finalize by {writer}")


def finalize_abort(chain: VersionChain, writer: TxnId) -> None:
    """Restore the current version and strand the pending one for GC.

    A no-op when this chain holds nothing from `writer` (write sets are
    applied per shard; an abort sweeps every chain the transaction may have
    touched).
    """
    for t in chain.tuples:
        if t.et.is_txn and t.et.txn == writer:
            t.et = TF_POS_INF
        if t.bt.is_txn and t.bt.txn == writer:
            t.bt = TF_NEG_INF


def collect_obsolete(chain: VersionChain, global_min_bt: Timestamp) -> list[MVTuple]:
    """Tuples safe to detach: expired before the GC horizon, or aborted.

    The newest visible tuple always has an open end (PosInf or an in-flight
    writer) and is structurally excluded.
    """
    out = []
    for t in chain.tuples:
        if t.detached:
            continue
        if t.bt.tag == TimeField.NEG_INF:
            out.append(t)
        elif t.et.is_commit and t.et.ts < global_min_bt:
            out.append(t)
    return out


def detach_tuples(chain: VersionChain, tuples: list[MVTuple]) -> int:
    """Remove collected tuples from the chain; skips already-detached ones."""
    removed = 0
    victims = set()
    for t in tuples:
        if not t.detached:
            t.detached = True
            victims.add(id(t))
            removed += 1
    if victims:
        chain.tuples = [t for t in chain.tuples if id(t) not in victims]
    return removed
