"""Shared value types: object ids, timestamps, time fields, property values.

Everything in here is immutable and freely shareable between shard engines.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

# GlobalId bit layout: 2 bits kind | 14 bits shard | 48 bits local.
KIND_BITS = 2
SHARD_BITS = 14
LOCAL_BITS = 48
MAX_SHARDS = 1 << SHARD_BITS
MAX_LOCAL = 1 << LOCAL_BITS


class Kind(enum.IntEnum):
    VERTEX = 0
    EDGE = 1
    VPROP = 2
    EPROP = 3


GlobalId = int


def make_id(kind: Kind, shard: int, local: int) -> GlobalId:
    """Pack (kind, shard, local) into a single 64-bit id."""
    if not 0 <= shard < MAX_SHARDS:
        raise ConfigError(f"shard {shard} out of range")
    if not 0 <= local < MAX_LOCAL:
        raise ConfigError(f"local counter {local} overflows {LOCAL_BITS} bits")
    return (int(kind) << (SHARD_BITS + LOCAL_BITS)) | (shard << LOCAL_BITS) | local


def kind_of(gid: GlobalId) -> Kind:
    return Kind(gid >> (SHARD_BITS + LOCAL_BITS))


def shard_of(gid: GlobalId) -> int:
    return (gid >> LOCAL_BITS) & (MAX_SHARDS - 1)


def local_of(gid: GlobalId) -> int:
    return gid & (MAX_LOCAL - 1)


@dataclass(frozen=True, order=True, slots=True)
class Timestamp:
    """Lamport pair: (counter, shard) with lexicographic total order.

    No two timestamps issued anywhere in a cluster compare equal because
    counters are strictly monotone per shard and the shard index breaks ties.
    """

    counter: int
    shard: int


# Sentinels sit below/above every issuable timestamp under the pair order.
TS_NEG_INF = Timestamp(-1, -1)
TS_POS_INF = Timestamp((1 << 63) - 1, MAX_SHARDS - 1)
# Bulk-loaded data carries this commit time; oracles start issuing above it.
TS_INITIAL = Timestamp(1, 0)


def ts_compare(a: Timestamp, b: Timestamp) -> int:
    """-1 / 0 / +1 lexicographic on (counter, shard)."""
    if a.counter != b.counter:
        return -1 if a.counter < b.counter else 1
    if a.shard != b.shard:
        return -1 if a.shard < b.shard else 1
    return 0


@dataclass(frozen=True, order=True, slots=True)
class TxnId:
    """Globally unique transaction id: (coordinator shard, per-shard sequence)."""

    shard: int
    seq: int


class TimeField:
    """Begin/end time slot on a version or header.

    One of: Commit(ts), Txn(txid), NegInf, PosInf.  A Txn field is transient
    state installed by an in-flight writer; it is only ever pattern-matched,
    never ordered.  Commit fields order through their timestamps with the
    NegInf/PosInf variants below/above everything.
    """

    __slots__ = ("tag", "ts", "txn")

    COMMIT = 0
    TXN = 1
    NEG_INF = 2
    POS_INF = 3

    def __init__(self, tag: int, ts: Timestamp | None = None, txn: TxnId | None = None):
        self.tag = tag
        self.ts = ts
        self.txn = txn

    @staticmethod
    def commit(ts: Timestamp) -> "TimeField":
        return TimeField(TimeField.COMMIT, ts=ts)

    @staticmethod
    def of_txn(txn: TxnId) -> "TimeField":
        return TimeField(TimeField.TXN, txn=txn)

    @property
    def is_commit(self) -> bool:
        return self.tag == TimeField.COMMIT

    @property
    def is_txn(self) -> bool:
        return self.tag == TimeField.TXN

    def bound(self) -> Timestamp:
        """The field as an orderable bound; raises on Txn fields."""
        if self.tag == TimeField.COMMIT:
            return self.ts
        if self.tag == TimeField.NEG_INF:
            return TS_NEG_INF
        if self.tag == TimeField.POS_INF:
            return TS_POS_INF
        raise InvariantError("Txn time field has no order; resolve it first")

    def __eq__(self, other):
        if not isinstance(other, TimeField):
            return NotImplemented
        return (self.tag, self.ts, self.txn) == (other.tag, other.ts, other.txn)

    def __hash__(self):
        return hash((self.tag, self.ts, self.txn))

    def __repr__(self):
        if self.tag == TimeField.COMMIT:
            return f"Commit({self.ts.counter},{self.ts.shard})"
        if self.tag == TimeField.TXN:
            return f"Txn({self.txn.shard}:{self.txn.seq})"
        return "NegInf" if self.tag == TimeField.NEG_INF else "PosInf"


TF_NEG_INF = TimeField(TimeField.NEG_INF)
TF_POS_INF = TimeField(TimeField.POS_INF)


# Property values are plain Python scalars; the tag taxonomy is enforced by
# the helpers below (bool is checked before int since bool <: int in Python).
PropValue = Union[int, float, bool, str, None]


class _Tombstone:
    """Deletion marker version; reads resolve it to NotFound."""

    __repr__ = lambda self: "<tombstone>"


TOMBSTONE = _Tombstone()


def prop_tag(v: PropValue) -> str:
    if v is None:
        return "n"
    if isinstance(v, bool):
        return "b"
    if isinstance(v, int):
        return "i"
    if isinstance(v, float):
        return "f"
    if isinstance(v, str):
        return "s"
    raise TypeError(f"unsupported property value {v!r}")


def prop_eq(a: PropValue, b: PropValue) -> bool:
    """Equality across tags is always False, never an error."""
    if prop_tag(a) != prop_tag(b):
        return False
    return a == b


def prop_compare(a: PropValue, b: PropValue) -> int:
    """Ordering comparison; cross-tag ordering is a type error."""
    ta, tb = prop_tag(a), prop_tag(b)
    if ta != tb:
        raise QueryTypeError(f"cannot order {ta!r} value against {tb!r} value")
    if ta == "n":
        return 0
    if a < b:
        return -1
    return 1 if a > b else 0


class GraphError(Exception):
    """Base class for all engine errors."""


class ConfigError(GraphError):
    """Invalid configuration or exhausted id space."""


class ResourceError(GraphError):
    """Memory pool exhaustion."""


class InvariantError(GraphError):
    """Internal structural invariant violated; fatal."""


class LoadError(GraphError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class ParseError(GraphError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at offset {offset})")
        self.offset = offset


class PlanError(GraphError):
    pass


class QueryTypeError(GraphError):
    pass


class TransportError(GraphError):
    pass


class AbortReason(enum.Enum):
    WW_CONFLICT = "ww_conflict"
    NOT_FOUND = "not_found"
    VALIDATION = "validation"
    PRE_READ = "pre_read"            # no-opt mode: unresolved pending writer
    COMMIT_DEP_FAILED = "commit_dep_failed"
    ABORT_DEP_FAILED = "abort_dep_failed"
    DEP_TIMEOUT = "dep_timeout"
    FENCED = "fenced"
    TYPE_ERROR = "type_error"
    CLIENT = "client"


class AbortError(GraphError):
    """Raised when a transaction must abort; carries the reason code."""

    def __init__(self, reason: AbortReason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail
