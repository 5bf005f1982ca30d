"""Shard-local graph store: vertex/edge tables, fixed-size row lists, memory pool.

Adjacency lists and property cells live in rows of a fixed cell count; a new
row is allocated only after every earlier row has been filled at least once,
so online inserts reuse vacancies and compaction restores ascending-id order
and returns empty rows to the pool.  All object classes are pool-allocated so
allocation/recycle balances can be audited exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from .common import (
    TF_POS_INF,
    GlobalId,
    InvariantError,
    Kind,
    LoadError,
    ResourceError,
    TimeField,
    Timestamp,
    TS_INITIAL,
    make_id,
    shard_of,
)

OUT = 0
IN = 1

DEFAULT_ROW_CELLS = 8


class Interner:
    """Cluster-wide string dictionary for labels and property keys."""

    def __init__(self):
        self._by_str: dict[str, int] = {}
        self._by_id: list[str] = []

    def intern(self, s: str) -> int:
        idx = self._by_str.get(s)
        if idx is None:
            idx = len(self._by_id)
            self._by_str[s] = idx
            self._by_id.append(s)
        return idx

    def lookup(self, s: str) -> Optional[int]:
        return self._by_str.get(s)

    def name(self, idx: int) -> str:
        return self._by_id[idx]

    def snapshot(self) -> list[str]:
        return list(self._by_id)

    def load_snapshot(self, names: list[str]) -> None:
        for n in names:
            self.intern(n)


class EdgeCell:
    __slots__ = ("neighbor", "edge", "direction", "occupied")

    def __init__(self):
        self.clear()

    def clear(self):
        self.neighbor = 0
        self.edge = 0
        self.direction = 0
        self.occupied = False


class PropCell:
    __slots__ = ("key", "chain", "occupied")

    def __init__(self):
        self.clear()

    def clear(self):
        self.key = 0
        self.chain = None
        self.occupied = False


class Row:
    __slots__ = ("cells", "next")

    def __init__(self, cell_factory, width: int):
        self.cells = [cell_factory() for _ in range(width)]
        self.next: Optional[Row] = None

    def wipe(self):
        for c in self.cells:
            c.clear()
        self.next = None


class MemoryPool:
    """Free-list allocator per object class with exact balance accounting."""

    CLASSES = ("vertex", "edge", "erow", "prow", "tuple")

    def __init__(self, capacity: Optional[dict[str, int]] = None):
        self._free: dict[str, list] = {c: [] for c in self.CLASSES}
        self.allocated: dict[str, int] = {c: 0 for c in self.CLASSES}
        self.recycled: dict[str, int] = {c: 0 for c in self.CLASSES}
        self.capacity = capacity or {}

    def alloc(self, cls: str, factory: Callable):
        cap = self.capacity.get(cls)
        if cap is not None and self.live(cls) >= cap:
            raise ResourceError(f"pool class {cls!r} exhausted at {cap}")
        self.allocated[cls] += 1
        free = self._free[cls]
        if free:
            return free.pop()
        return factory()

    def recycle(self, cls: str, obj) -> None:
        self.recycled[cls] += 1
        self._free[cls].append(obj)

    def live(self, cls: str) -> int:
        return self.allocated[cls] - self.recycled[cls]

    def balance(self) -> dict[str, int]:
        b = {c: self.live(c) for c in self.CLASSES}
        b["total"] = sum(b.values())
        return b


class RowList:
    """Head reference plus cached occupancy counters for one row list."""

    __slots__ = ("head", "rows", "occupied", "high_water", "row_cls")

    def __init__(self, row_cls: str):
        self.head: Optional[Row] = None
        self.rows = 0
        self.occupied = 0
        self.high_water = 0
        self.row_cls = row_cls

    def iter_rows(self) -> Iterator[Row]:
        r = self.head
        while r is not None:
            yield r
            r = r.next

    def iter_occupied(self):
        for row in self.iter_rows():
            for cell in row.cells:
                if cell.occupied:
                    yield cell

    def capacity(self, width: int) -> int:
        return self.rows * width


def _cell_factory_for(row_cls: str):
    return EdgeCell if row_cls == "erow" else PropCell


@dataclass(slots=True)
class VertexHeader:
    gid: GlobalId
    label: int
    bt: TimeField
    et: TimeField
    edge_rows: RowList
    vp_rows: RowList


@dataclass(slots=True)
class EdgeHeader:
    gid: GlobalId
    label: int
    src: GlobalId
    dst: GlobalId
    bt: TimeField
    et: TimeField
    ep_rows: Optional[RowList]
    mirror: bool = False


@dataclass
class LoadStats:
    vertices: int = 0
    edges: int = 0
    vprops: int = 0
    eprops: int = 0

    def as_dict(self):
        return {"V": self.vertices, "E": self.edges, "VP": self.vprops, "EP": self.eprops}


class ShardStore:
    """One shard's tables; mutated only by that shard's engine."""

    def __init__(self, shard: int, interner: Interner,
                 row_cells: int = DEFAULT_ROW_CELLS,
                 pool_capacity: Optional[dict[str, int]] = None):
        self.shard = shard
        self.interner = interner
        self.row_cells = row_cells
        self.pool = MemoryPool(pool_capacity)
        self.vertices: dict[GlobalId, VertexHeader] = {}
        self.edges: dict[GlobalId, EdgeHeader] = {}
        self._counters = {k: 0 for k in Kind}

    def next_local(self, kind: Kind) -> int:
        n = self._counters[kind]
        self._counters[kind] = n + 1
        return n

    def new_gid(self, kind: Kind) -> GlobalId:
        return make_id(kind, self.shard, self.next_local(kind))

    def _new_row(self, row_cls: str) -> Row:
        factory = _cell_factory_for(row_cls)
        row = self.pool.alloc(row_cls, lambda: Row(factory, self.row_cells))
        row.wipe()
        return row

    # -- vertices ----------------------------------------------------------

    def create_vertex(self, label: int, bt_field: TimeField,
                      gid: Optional[GlobalId] = None) -> VertexHeader:
        if gid is None:
            gid = self.new_gid(Kind.VERTEX)
        header = self.pool.alloc(
            "vertex", lambda: VertexHeader(0, 0, TF_POS_INF, TF_POS_INF,
                                           RowList("erow"), RowList("prow")))
        header.gid, header.label = gid, label
        header.bt, header.et = bt_field, TF_POS_INF
        header.edge_rows = RowList("erow")
        header.vp_rows = RowList("prow")
        self.vertices[gid] = header
        return header

    def drop_vertex(self, gid: GlobalId) -> None:
        header = self.vertices.pop(gid, None)
        if header is not None:
            self.pool.recycle("vertex", header)

    # -- edges ---------------------------------------------------------------

    def create_edge(self, gid: GlobalId, label: int, src: GlobalId, dst: GlobalId,
                    bt_field: TimeField, mirror: bool = False) -> EdgeHeader:
        header = self.pool.alloc(
            "edge", lambda: EdgeHeader(0, 0, 0, 0, TF_POS_INF, TF_POS_INF, None))
        header.gid, header.label = gid, label
        header.src, header.dst = src, dst
        header.bt, header.et = bt_field, TF_POS_INF
        header.ep_rows = None if mirror else RowList("prow")
        header.mirror = mirror
        self.edges[gid] = header
        return header

    def drop_edge(self, gid: GlobalId) -> None:
        header = self.edges.pop(gid, None)
        if header is not None:
            self.pool.recycle("edge", header)

    # -- row lists -----------------------------------------------------------

    def insert_edge_cell(self, owner: VertexHeader, neighbor: GlobalId,
                         edge: GlobalId, direction: int) -> tuple[int, int]:
        """Write an edge cell into the first vacant slot; grow by one row if full."""
        rl = owner.edge_rows
        pos = self._claim_slot(rl)
        row_idx, slot, cell = pos
        if any(c.occupied and c.edge == edge and c.direction == direction
               for c in rl.iter_occupied()):
            raise InvariantError(f"duplicate edge cell for {edge}")
        cell.neighbor = neighbor
        cell.edge = edge
        cell.direction = direction
        cell.occupied = True
        rl.occupied += 1
        rl.high_water = max(rl.high_water, rl.occupied)
        return row_idx, slot

    def _claim_slot(self, rl: RowList):
        row_idx = 0
        last = None
        for row in rl.iter_rows():
            for slot, cell in enumerate(row.cells):
                if not cell.occupied:
                    return row_idx, slot, cell
            last = row
            row_idx += 1
        new_row = self._new_row(rl.row_cls)
        if last is None:
            rl.head = new_row
        else:
            last.next = new_row
        rl.rows += 1
        return row_idx, 0, new_row.cells[0]

    def vacate_edge_cell(self, owner: VertexHeader, edge: GlobalId) -> bool:
        rl = owner.edge_rows
        for row in rl.iter_rows():
            for cell in row.cells:
                if cell.occupied and cell.edge == edge:
                    cell.clear()
                    rl.occupied -= 1
                    return True
        return False

    def set_prop_cell(self, owner_gid: GlobalId, rl: RowList, key: int,
                      prop_kind: Kind):
        """Find or create the property cell for `key`; one cell per key."""
        from .mvstore import VersionChain

        for cell in rl.iter_occupied():
            if cell.key == key:
                return cell
        row_idx, slot, cell = self._claim_slot(rl)
        cell.key = key
        cell.chain = VersionChain(self.new_gid(prop_kind))
        cell.occupied = True
        rl.occupied += 1
        rl.high_water = max(rl.high_water, rl.occupied)
        return cell

    def find_prop_cell(self, rl: RowList, key: int):
        for cell in rl.iter_occupied():
            if cell.key == key:
                return cell
        return None

    # -- scans ---------------------------------------------------------------

    def scan_adjacency(self, owner: VertexHeader, direction: Optional[int],
                       label: Optional[int],
                       edge_visible: Callable[[EdgeHeader], bool]):
        """Yield (neighbor gid, edge gid, direction) in row order, then slot order.

        `edge_visible` encapsulates snapshot resolution; label filtering uses
        the local header (owner copy or mirror), so no remote lookups happen.
        """
        for row in owner.edge_rows.iter_rows():
            for cell in row.cells:
                if not cell.occupied:
                    continue
                if direction is not None and cell.direction != direction:
                    continue
                header = self.edges.get(cell.edge)
                if header is None:
                    raise InvariantError(f"edge cell {cell.edge} without local header")
                if label is not None and header.label != label:
                    continue
                if edge_visible(header):
                    yield cell.neighbor, cell.edge, cell.direction

    # -- compaction ----------------------------------------------------------

    def compact_rows(self, rl: RowList) -> tuple[int, int]:
        """Pack occupied cells toward the head in ascending id order.

        Returns (moved cells, freed rows).  Cell contents are preserved
        bit-identically; only their positions change.
        """
        if rl.head is None:
            return 0, 0
        if rl.row_cls == "erow":
            entries = [(c.neighbor, c.edge, c.direction) for c in rl.iter_occupied()]
            entries.sort()
        else:
            entries = [(c.key, c.chain) for c in rl.iter_occupied()]
            entries.sort(key=lambda e: e[0])

        before = []
        for row in rl.iter_rows():
            for slot, cell in enumerate(row.cells):
                if cell.occupied:
                    before.append((id(row), slot, (cell.neighbor, cell.edge, cell.direction)
                                   if rl.row_cls == "erow" else (cell.key,)))

        needed = (len(entries) + self.row_cells - 1) // self.row_cells
        rows = list(rl.iter_rows())
        moved = 0
        idx = 0
        for row in rows[:needed]:
            for slot, cell in enumerate(row.cells):
                if idx < len(entries):
                    if rl.row_cls == "erow":
                        neighbor, edge, direction = entries[idx]
                        changed = (not cell.occupied or cell.neighbor != neighbor
                                   or cell.edge != edge)
                        cell.neighbor, cell.edge, cell.direction = neighbor, edge, direction
                    else:
                        key, chain = entries[idx]
                        changed = not cell.occupied or cell.key != key
                        cell.key, cell.chain = key, chain
                    cell.occupied = True
                    if changed:
                        moved += 1
                    idx += 1
                else:
                    if cell.occupied:
                        cell.clear()
        freed = 0
        for row in rows[needed:]:
            row.wipe()
            self.pool.recycle(rl.row_cls, row)
            freed += 1
        if needed == 0:
            rl.head = None
        else:
            for i in range(needed - 1):
                rows[i].next = rows[i + 1]
            rows[needed - 1].next = None
        rl.rows = needed
        rl.high_water = rl.occupied
        return moved, freed

    # -- census ---------------------------------------------------------------

    def census(self) -> dict:
        """Walk every structure and count live objects per pool class."""
        counts = {c: 0 for c in MemoryPool.CLASSES}
        chain_violations = []
        for header in self.vertices.values():
            counts["vertex"] += 1
            counts["erow"] += header.edge_rows.rows
            counts["prow"] += header.vp_rows.rows
            for cell in header.vp_rows.iter_occupied():
                counts["tuple"] += sum(1 for t in cell.chain.tuples if not t.detached)
                chain_violations.extend(_check_chain(cell.chain))
        for header in self.edges.values():
            counts["edge"] += 1
            if header.ep_rows is not None:
                counts["prow"] += header.ep_rows.rows
                for cell in header.ep_rows.iter_occupied():
                    counts["tuple"] += sum(1 for t in cell.chain.tuples if not t.detached)
                    chain_violations.extend(_check_chain(cell.chain))
        return {"counts": counts, "chain_violations": chain_violations}


def _check_chain(chain) -> list[str]:
    """Structural chain invariants: ordered, contiguous, at most one pending pair."""
    issues = []
    committed = [t for t in chain.tuples if t.bt.is_commit]
    for a, b in zip(committed, committed[1:]):
        if a.et.is_commit and a.et.ts != b.bt.ts:
            issues.append(f"chain {chain.owner}: gap {a.et.ts} != {b.bt.ts}")
        if a.bt.ts >= b.bt.ts:
            issues.append(f"chain {chain.owner}: out of order")
    pend = [t for t in chain.tuples if t.bt.is_txn]
    locked = [t for t in chain.tuples if t.et.is_txn]
    if len(pend) > 1 or len(locked) > 1:
        issues.append(f"chain {chain.owner}: multiple pending/locked tuples")
    if pend and locked and pend[0].bt.txn != locked[0].et.txn:
        issues.append(f"chain {chain.owner}: pending/locked writer mismatch")
    return issues


# -- bulk loading -------------------------------------------------------------


def partition_key(key: str, shards: int) -> int:
    import zlib

    return zlib.crc32(key.encode()) % shards


def load_graph(stores: list[ShardStore], interner: Interner,
               vertex_file: str, edge_file: str,
               vprop_file: str, eprop_file: str) -> tuple[LoadStats, dict, dict]:
    """Bulk-load tab-separated files into the shard stores.

    All loaded objects carry the initial commit time; edge cells end up in
    ascending neighbor-id order.  Returns (stats, vertex key map, edge key map).
    Every vertex receives an `ori_id` text property equal to its key.
    """
    shards = len(stores)
    stats = LoadStats()
    initial = TimeField.commit(TS_INITIAL)
    vmap: dict[str, GlobalId] = {}
    emap: dict[str, GlobalId] = {}

    for line_no, parts in _read_tsv(vertex_file, 2):
        key, label = parts
        if key in vmap:
            raise LoadError(f"duplicate vertex key {key!r}", line_no)
        shard = partition_key(key, shards)
        header = stores[shard].create_vertex(interner.intern(label), initial)
        vmap[key] = header.gid
        stats.vertices += 1

    # Stage edges per vertex so cells can be written sorted by neighbor id.
    staged: dict[GlobalId, list[tuple[GlobalId, GlobalId, int]]] = {}
    for line_no, parts in _read_tsv(edge_file, 4):
        ekey, src_key, dst_key, label = parts
        if ekey in emap:
            raise LoadError(f"duplicate edge key {ekey!r}", line_no)
        src = vmap.get(src_key)
        dst = vmap.get(dst_key)
        if src is None or dst is None:
            raise LoadError(f"edge {ekey!r} references missing vertex", line_no)
        src_shard = shard_of(src)
        dst_shard = shard_of(dst)
        gid = stores[src_shard].new_gid(Kind.EDGE)
        label_id = interner.intern(label)
        stores[src_shard].create_edge(gid, label_id, src, dst, initial)
        if dst_shard != src_shard:
            stores[dst_shard].create_edge(gid, label_id, src, dst, initial, mirror=True)
        staged.setdefault(src, []).append((dst, gid, OUT))
        staged.setdefault(dst, []).append((src, gid, IN))
        emap[ekey] = gid
        stats.edges += 1

    for vgid, cells in staged.items():
        store = stores[shard_of(vgid)]
        header = store.vertices[vgid]
        cells.sort()
        for neighbor, egid, direction in cells:
            store.insert_edge_cell(header, neighbor, egid, direction)

    def put_prop(owner_gid: GlobalId, rl: RowList, key: str, value, prop_kind: Kind):
        from .mvstore import alloc_tuple

        store = stores[shard_of(owner_gid)]
        cell = store.set_prop_cell(owner_gid, rl, interner.intern(key), prop_kind)
        cell.chain.tuples.append(alloc_tuple(store.pool, initial, TF_POS_INF, value))

    for key, gid in vmap.items():
        header = stores[shard_of(gid)].vertices[gid]
        put_prop(gid, header.vp_rows, "ori_id", key, Kind.VPROP)

    for line_no, parts in _read_tsv(vprop_file, 4):
        vkey, prop, tag, raw = parts
        gid = vmap.get(vkey)
        if gid is None:
            raise LoadError(f"vprop references missing vertex {vkey!r}", line_no)
        header = stores[shard_of(gid)].vertices[gid]
        put_prop(gid, header.vp_rows, prop, _parse_value(tag, raw, line_no), Kind.VPROP)
        stats.vprops += 1

    for line_no, parts in _read_tsv(eprop_file, 4):
        ekey, prop, tag, raw = parts
        gid = emap.get(ekey)
        if gid is None:
            raise LoadError(f"eprop references missing edge {ekey!r}", line_no)
        header = stores[shard_of(gid)].edges[gid]
        put_prop(gid, header.ep_rows, prop, _parse_value(tag, raw, line_no), Kind.EPROP)
        stats.eprops += 1

    return stats, vmap, emap


def _read_tsv(path: str, fields: int):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != fields:
                raise LoadError(f"expected {fields} fields, got {len(parts)}", line_no)
            yield line_no, parts


def _parse_value(tag: str, raw: str, line_no: int):
    try:
        if tag == "i":
            return int(raw)
        if tag == "f":
            return float(raw)
        if tag == "b":
            return raw.lower() in ("1", "true", "t", "yes")
        if tag == "s":
            return raw
    except ValueError as exc:
        raise LoadError(f"bad value {raw!r} for tag {tag!r}: {exc}", line_no)
    raise LoadError(f"unknown type tag {tag!r}", line_no)
