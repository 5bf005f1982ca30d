"""Shard engines and the decentralized transaction coordinator.

Each shard engine owns a store slice, a status-table replica, a
recent-committed table, an oracle and an index; it mutates them only while
handling one envelope at a time.  A client request spawns a coordinator task
on the receiving shard, and that task drives the transaction through
execution (per-step shard dispatch), validation (commit-timestamp
acquisition, provisional write-set publication, windowed conflict scans),
dependency resolution, and the commit/abort broadcast.  Exactly one
coordinator exists per transaction.

Commit timestamps are drawn above every active begin timestamp in the
cluster; with plain Lamport clocks this is what keeps a commit from sliding
retroactively underneath an already-running snapshot.
"""

from __future__ import annotations

import itertools
from typing import Optional

from .common import (
    TF_POS_INF,
    TOMBSTONE,
    AbortError,
    AbortReason,
    GlobalId,
    InvariantError,
    Kind,
    ParseError,
    PlanError,
    QueryTypeError,
    TimeField,
    Timestamp,
    TxnId,
    kind_of,
    prop_compare,
    prop_eq,
    shard_of,
)
from .cluster import (
    CLIENT_NODE,
    CLIENT_REPLY,
    CLIENT_REQUEST,
    RCT_INSERT,
    RCT_QUERY,
    RCT_REPLY,
    STATUS_UPDATE,
    STEP_DISPATCH,
    STEP_RESULT,
    TS_PROBE,
    TS_REPLY,
    ClusterConfig,
    Envelope,
    Request,
    RequestAll,
    SimRuntime,
    Sleep,
    TimestampOracle,
    assign_coordinator,
)
from .mvstore import (
    ReadMode,
    VersionChain,
    alloc_tuple,
    finalize_abort,
    finalize_commit,
    get_visible_version,
    install_pending_version,
    resolve_existence,
)
from .query import (
    K_EDGE,
    K_VERTEX,
    PropertyIndex,
    parse,
    parse_admin,
    plan as plan_pipeline,
)
from .storage import IN, OUT, Interner, ShardStore, load_graph
from .txn import (
    RCT,
    TST,
    Isolation,
    ShardTxnState,
    TxnCtx,
    TxnStatus,
    check_conflicts,
    item_adjacency,
    item_edge,
    item_label_pred,
    item_prop,
    item_prop_pred,
    item_table_scan,
    item_vertex,
)

TST_PRUNE_AGE_US = 5_000_000


class ShardEngine:
    """One shard: store, tables, oracle, index, per-transaction fragments."""

    def __init__(self, cluster: "GraphCluster", shard: int):
        self.cluster = cluster
        self.shard = shard
        cfg = cluster.config
        self.store = ShardStore(shard, cluster.interner, cfg.row_cells, cfg.pool_capacity)
        self.tst = TST(shard)
        self.rct = RCT(shard)
        self.oracle = TimestampOracle(shard)
        self.index = PropertyIndex(shard)
        self.frags: dict[TxnId, ShardTxnState] = {}
        self.txn_seq = itertools.count(1)
        self.terminal_at: dict[TxnId, int] = {}
        # GC feeds: chains and headers touched by finalization.
        self.gc_chains: dict[int, VersionChain] = {}
        self.gc_vertices: dict[GlobalId, None] = {}
        self.gc_edges: dict[GlobalId, None] = {}
        self.gc_recycled = {"ExpiredVersions": 0, "AbortedVersions": 0,
                            "EmptyRows": 0, "RctPrune": 0, "IndexSweep": 0}
        # Fault-injection hooks (tests only).
        self.test_disable_ww = False
        self.test_torn_commit = False

    # -- plumbing ---------------------------------------------------------------

    def frag(self, txid: TxnId) -> ShardTxnState:
        st = self.frags.get(txid)
        if st is None:
            st = ShardTxnState()
            self.frags[txid] = st
        return st

    def probe(self, txid: TxnId):
        return self.tst.probe(txid)

    def reply(self, env: Envelope, payload: dict) -> None:
        self.cluster.runtime.send(
            Envelope(_reply_type(env.type), env.txid, self.shard, env.sender,
                     payload, self.oracle.counter, reply_to=env.req_id))

    def handle(self, env: Envelope) -> None:
        from .coordinator import client_request_task

        self.oracle.observe(env.clock)
        if env.type == CLIENT_REQUEST:
            self.cluster.runtime.spawn(client_request_task(self, env))
        elif env.type == STEP_DISPATCH:
            self.reply(env, self.handle_step(env))
        elif env.type == STATUS_UPDATE:
            p = env.payload
            status = TxnStatus(p["status"])
            self.tst.update(env.txid, status, p["bt"], p.get("ct"))
            if status in (TxnStatus.COMMIT, TxnStatus.ABORT):
                self.terminal_at.setdefault(env.txid, self.cluster.runtime.now)
        elif env.type == RCT_INSERT:
            self.rct.insert_provisional(env.payload["ct"], env.txid,
                                        self.frag(env.txid).write_items)
        elif env.type == RCT_QUERY:
            self.reply(env, self.handle_rct_query(env))
        elif env.type == TS_PROBE:
            self.reply(env, self.handle_ts_probe(env))
        else:
            raise InvariantError(f"shard {self.shard}: unknown envelope {env.type}")

    def handle_ts_probe(self, env: Envelope) -> dict:
        op = env.payload.get("op")
        if op == "status":
            status, ct = self.tst.probe(env.payload["txid"])
            return {"status": int(status), "ct": ct, "clock": self.oracle.counter}
        if op == "max_active":
            return {"max_active": self.oracle.max_active(), "clock": self.oracle.counter}
        if op == "min_active":
            return {"min_active": self.oracle.min_active(),
                    "floor": self.oracle.floor(), "clock": self.oracle.counter}
        raise InvariantError(f"unknown probe op {op!r}")

    def handle_rct_query(self, env: Envelope) -> dict:
        p = env.payload
        txid, bt, ct = env.txid, p["bt"], p["ct"]
        self.rct.bump_fence(ct)
        entries = self.rct.range_query(bt, ct)
        fenced = any(e.txid == txid and e.fenced for e in entries)
        if p.get("fence_only"):
            return {"fenced": fenced, "verdict": "pass", "deps": []}
        frag = self.frags.get(txid)
        reads = frag.reads if frag is not None else {}
        deps = set()
        for entry in entries:
            if entry.txid == txid:
                continue
            conflicts = check_conflicts(entry, reads)
            if not conflicts:
                continue
            status, _ = self.tst.probe(entry.txid)
            if status == TxnStatus.ABORT:
                continue
            if entry.final or status == TxnStatus.COMMIT or not self.cluster.config.optimistic:
                return {"fenced": fenced, "verdict": "fail", "deps": [],
                        "conflict": sorted(map(repr, conflicts))[0]}
            deps.add(entry.txid)
        return {"fenced": fenced, "verdict": "pass", "deps": sorted(deps)}

    # -- transactional primitives ---------------------------------------------------

    def _read_ctx(self, p: dict):
        txid, bt = p["txid"], p["bt"]
        self.tst.ensure(txid, bt)
        mode = ReadMode.SNAPSHOT if p["snapshot"] else ReadMode.PAPER
        return txid, bt, mode, self.cluster.config.optimistic

    def element_visible(self, frag, info, header, existence_item):
        txid, bt, mode, opt = info
        res = resolve_existence(header.bt, header.et, bt, txid, self.probe, mode, opt)
        if res.must_abort:
            raise AbortError(res.abort, f"element {header.gid}")
        frag.record_read(existence_item, res.found, res.prov)
        return res.found, res.dep

    def _quiet_visible(self, header, info):
        """Visibility for scan filtering; the scan footprint carries the
        conflict surface, so misses need no per-element read entry."""
        txid, bt, mode, opt = info
        res = resolve_existence(header.bt, header.et, bt, txid, self.probe, mode, opt)
        if res.must_abort:
            raise AbortError(res.abort, f"element {header.gid}")
        return res.found, res.dep

    def visible_prop(self, frag, info, owner_kind: Kind, gid: GlobalId, key: str,
                     deps: list, create_cell: bool = True):
        """Targeted property read.  Find-or-create keeps the read footprint on
        the same chain id a later writer of this (owner, key) slot will lock."""
        header, rl, prop_kind = self._prop_home(owner_kind, gid)
        key_id = self.store.interner.intern(key)
        if create_cell:
            cell = self.store.set_prop_cell(gid, rl, key_id, prop_kind)
        else:
            cell = self.store.find_prop_cell(rl, key_id)
            if cell is None:
                return False, None
        txid, bt, mode, opt = info
        res = get_visible_version(cell.chain, bt, txid, self.probe, mode, opt)
        if res.must_abort:
            raise AbortError(res.abort, f"prop {key} of {gid}")
        if res.dep:
            deps.append(res.dep)
        frag.record_read(item_prop(cell.chain.owner), (res.found, res.value),
                         res.prov, (gid, key))
        return res.found, res.value

    def _prop_home(self, owner_kind: Kind, gid: GlobalId):
        if owner_kind == Kind.VERTEX:
            header = self.store.vertices.get(gid)
            if header is None:
                raise AbortError(AbortReason.NOT_FOUND, f"vertex {gid}")
            return header, header.vp_rows, Kind.VPROP
        header = self.store.edges.get(gid)
        if header is None or header.mirror:
            raise AbortError(AbortReason.NOT_FOUND, f"edge {gid}")
        return header, header.ep_rows, Kind.EPROP

    def write_prop(self, frag, info, owner_kind: Kind, gid: GlobalId, key: str, value):
        txid = info[0]
        header, rl, prop_kind = self._prop_home(owner_kind, gid)
        key_id = self.store.interner.intern(key)
        cell = self.store.find_prop_cell(rl, key_id)
        fresh_cell = cell is None
        if fresh_cell:
            cell = self.store.set_prop_cell(gid, rl, key_id, prop_kind)
        chain = cell.chain
        pend = chain.pending()
        rewrite = pend is not None and pend.bt.txn == txid
        old = _superseded_value(chain)
        install_pending_version(chain, txid, value, allow_ww=self.test_disable_ww,
                                make_tuple=lambda *a: alloc_tuple(self.store.pool, *a))
        frag.record_write(item_prop(chain.owner))
        ekind = int(Kind.VERTEX if owner_kind == Kind.VERTEX else Kind.EDGE)
        if old is not None:
            frag.record_write(item_prop_pred(ekind, key_id, old))
        if value is not TOMBSTONE:
            frag.record_write(item_prop_pred(ekind, key_id, value))
        if fresh_cell:
            frag.record_write(("plist", gid))
        if not rewrite:
            frag.pending_chains.append((chain, Kind(ekind), key_id, gid, old))
        frag.write_log.append(("prop", gid, key, value, old))

    def lock_header(self, frag, header, txid: TxnId) -> None:
        """End-time swap on a header: the delete-side write-write gate."""
        if header.et.is_txn:
            if header.et.txn == txid:
                return
            if not self.test_disable_ww:
                raise AbortError(AbortReason.WW_CONFLICT, f"element {header.gid}")
        elif header.et.is_commit:
            raise AbortError(AbortReason.NOT_FOUND, f"element {header.gid} already deleted")
        header.et = TimeField.of_txn(txid)
        frag.pending_headers.append(header)

    # -- step execution ----------------------------------------------------------

    def handle_step(self, env: Envelope) -> dict:
        p = env.payload
        txid = env.txid
        if txid is not None and txid in self.tst.entries:
            status, _ = self.tst.probe(txid)
            if status == TxnStatus.ABORT:
                return {"abandoned": True}
        frag = self.frag(txid) if txid is not None else None
        info = self._read_ctx(p) if "bt" in p else None
        deps: list[TxnId] = []
        try:
            out = getattr(self, "_step_" + p["op"])(p, frag, info, deps)
        except AbortError as exc:
            return {"abort": exc.reason.value, "detail": exc.detail}
        counts = (len(frag.reads), len(frag.write_items)) if frag is not None else (0, 0)
        return {"out": out, "deps": sorted(set(deps)), "r": counts[0], "w": counts[1]}

    # Finalization (the commit/abort phase applied to this shard).

    def _step_finalize_commit(self, p, frag, info, deps):
        txid, ct = p["txid"], p["ct"]
        frag = self.frags.pop(txid, None) or ShardTxnState()
        torn = self.test_torn_commit
        for i, (chain, ekind, key_id, owner, old) in enumerate(frag.pending_chains):
            if torn and i % 2 == 1:
                finalize_abort(chain, txid)
                self.gc_chains[id(chain)] = chain
                continue
            finalize_commit(chain, txid, ct, missing_ok=self.test_disable_ww)
            self.gc_chains[id(chain)] = chain
            if self.index.covers(ekind, key_id):
                newest = chain.newest_settled()
                new_value = newest.value if newest is not None else None
                if old is not None:
                    self.index.remove(ekind, key_id, old, owner)
                if new_value is not None and new_value is not TOMBSTONE:
                    self.index.add(ekind, key_id, new_value, owner)
        for header in frag.pending_headers:
            _finalize_header(header, txid, ct, commit=True)
            if kind_of(header.gid) == Kind.VERTEX:
                self.gc_vertices[header.gid] = None
                self._index_vertex_delta(header, ct)
            else:
                self.gc_edges[header.gid] = None
                self._index_edge_delta(header, ct)
        if self.rct.has(ct):
            self.rct.mark_final(ct)
        self.index.last_ct = ct
        self.terminal_at.setdefault(txid, self.cluster.runtime.now)
        return {"reads": _export_reads(frag), "writes": frag.write_log}

    def _step_finalize_abort(self, p, frag, info, deps):
        txid = p["txid"]
        frag = self.frags.pop(txid, None) or ShardTxnState()
        for chain, *_ in frag.pending_chains:
            finalize_abort(chain, txid)
            self.gc_chains[id(chain)] = chain
        for header in frag.pending_headers:
            _finalize_header(header, txid, None, commit=False)
            if kind_of(header.gid) == Kind.VERTEX:
                self.gc_vertices[header.gid] = None
            else:
                self.gc_edges[header.gid] = None
        ct = p.get("ct")
        if ct is not None:
            self.rct.remove(ct)
        self.terminal_at.setdefault(txid, self.cluster.runtime.now)
        return {"reads": _export_reads(frag), "writes": []}

    def _index_vertex_delta(self, header, ct):
        created = header.bt.is_commit and header.bt.ts == ct
        deleted = header.et.is_commit and header.et.ts == ct
        if created and deleted:
            return
        for cell in header.vp_rows.iter_occupied():
            if not self.index.covers(Kind.VERTEX, cell.key):
                continue
            newest = cell.chain.newest_settled()
            if newest is None or newest.value is TOMBSTONE:
                continue
            if created:
                self.index.add(Kind.VERTEX, cell.key, newest.value, header.gid)
            elif deleted:
                self.index.remove(Kind.VERTEX, cell.key, newest.value, header.gid)

    def _index_edge_delta(self, header, ct):
        if header.mirror or header.ep_rows is None:
            return
        created = header.bt.is_commit and header.bt.ts == ct
        deleted = header.et.is_commit and header.et.ts == ct
        if created and deleted:
            return
        for cell in header.ep_rows.iter_occupied():
            if not self.index.covers(Kind.EDGE, cell.key):
                continue
            newest = cell.chain.newest_settled()
            if newest is None or newest.value is TOMBSTONE:
                continue
            if created:
                self.index.add(Kind.EDGE, cell.key, newest.value, header.gid)
            elif deleted:
                self.index.remove(Kind.EDGE, cell.key, newest.value, header.gid)

    # Scans and lookups.

    def _scan_elements(self, p, frag, info, deps, kind: Kind):
        preds = [tuple(x) for x in p.get("preds") or []]
        label = p.get("label")
        table = self.store.vertices if kind == Kind.VERTEX else self.store.edges
        exist_item = item_vertex if kind == Kind.VERTEX else item_edge
        label_id = self.store.interner.intern(label) if label is not None else None
        matched = []
        for gid, header in list(table.items()):
            if kind == Kind.EDGE and header.mirror:
                continue
            if label_id is not None and header.label != label_id:
                continue
            ok, dep = self._quiet_visible(header, info)
            if dep:
                deps.append(dep)
            if not ok:
                continue
            good = True
            for key, value in preds:
                found, got = self.visible_prop(frag, info, kind, gid, key, deps,
                                               create_cell=False)
                if not (found and prop_eq(got, value)):
                    good = False
                    break
            if good:
                matched.append(gid)
                frag.record_read(exist_item(gid), True)
        matched.sort()
        ekind = int(kind)
        if not preds and label is None:
            frag.record_read(item_table_scan(ekind), tuple(matched))
        if label is not None:
            frag.record_read(item_label_pred(ekind, label_id), (tuple(matched),))
        for key, value in preds:
            frag.record_read(item_prop_pred(ekind, self.store.interner.intern(key), value),
                             tuple(matched))
        if kind == Kind.VERTEX:
            return [("v", g) for g in matched]
        return [self._equad(table[g]) for g in matched]

    def _equad(self, header) -> tuple:
        return ("e", header.gid, header.src, header.dst,
                self.store.interner.name(header.label))

    def _step_scan_vertices(self, p, frag, info, deps):
        return self._scan_elements(p, frag, info, deps, Kind.VERTEX)

    def _step_scan_edges(self, p, frag, info, deps):
        return self._scan_elements(p, frag, info, deps, Kind.EDGE)

    def _step_index_lookup(self, p, frag, info, deps):
        kind = Kind.VERTEX if p["kind"] == "vertex" else Kind.EDGE
        key, value = p["key"], p["value"]
        key_id = self.store.interner.intern(key)
        bt = info[1]
        stale = self.index.last_ct is not None and bt < self.index.last_ct
        if not self.index.covers(kind, key_id) or stale:
            return self._scan_elements({"preds": [(key, value)]}, frag, info, deps, kind)
        table = self.store.vertices if kind == Kind.VERTEX else self.store.edges
        matched = []
        for gid in sorted(self.index.lookup(kind, key_id, value)):
            header = table.get(gid)
            if header is None:
                raise InvariantError(f"indexed gid {gid} missing from table")
            ok, dep = self._quiet_visible(header, info)
            if dep:
                deps.append(dep)
            if not ok:
                continue
            found, got = self.visible_prop(frag, info, kind, gid, key, deps)
            if found and prop_eq(got, value):
                matched.append(gid)
                frag.record_read((item_vertex if kind == Kind.VERTEX else item_edge)(gid), True)
        frag.record_read(item_prop_pred(int(kind), key_id, value), tuple(matched))
        if kind == Kind.VERTEX:
            return [("v", g) for g in matched]
        return [self._equad(table[g]) for g in matched]

    def _step_vertex_by_id(self, p, frag, info, deps):
        gid = p["gid"]
        header = self.store.vertices.get(gid)
        if header is None:
            frag.record_read(item_vertex(gid), False)
            return []
        ok, dep = self.element_visible(frag, info, header, item_vertex(gid))
        if dep:
            deps.append(dep)
        return [("v", gid)] if ok else []

    def _step_edge_by_id(self, p, frag, info, deps):
        gid = p["gid"]
        header = self.store.edges.get(gid)
        if header is None or header.mirror:
            frag.record_read(item_edge(gid), False)
            return []
        ok, dep = self.element_visible(frag, info, header, item_edge(gid))
        if dep:
            deps.append(dep)
        return [self._equad(header)] if ok else []

    def _step_adjacency(self, p, frag, info, deps):
        direction = p.get("direction")
        label = p.get("label")
        label_id = self.store.interner.intern(label) if label is not None else None
        want_edges = p.get("want_edges", False)
        out = []
        for idx, vgid in p["items"]:
            header = self.store.vertices.get(vgid)
            if header is None:
                raise InvariantError(f"adjacency over missing vertex {vgid}")

            def visible(eh):
                ok, dep = self._quiet_visible(eh, info)
                if dep:
                    deps.append(dep)
                if ok:
                    frag.record_read(item_edge(eh.gid), True)
                return ok

            triples = list(self.store.scan_adjacency(header, direction, label_id, visible))
            dirs = (direction,) if direction is not None else (OUT, IN)
            for d in dirs:
                sub = tuple(sorted((e, n) for n, e, cd in triples if cd == d))
                frag.record_read(item_adjacency(vgid, d), (sub, label))
            if want_edges:
                res = [self._equad(self.store.edges[e]) for n, e, cd in triples]
            else:
                res = [("v", n) for n, e, cd in triples]
            out.append((idx, res))
        return out

    def _step_adjacency_counted(self, p, frag, info, deps):
        """both() expansion over (vertex, multiplicity) pairs for k-hop probes."""
        out: dict[GlobalId, int] = {}
        touched = 0
        for vgid, count in p["items"]:
            header = self.store.vertices.get(vgid)
            if header is None:
                continue

            def visible(eh):
                ok, dep = self._quiet_visible(eh, info)
                if dep:
                    deps.append(dep)
                return ok

            for neighbor, _, _ in self.store.scan_adjacency(header, None, None, visible):
                out[neighbor] = out.get(neighbor, 0) + count
                touched += count
        return {"frontier": sorted(out.items()), "touched": touched}

    def _step_read_props(self, p, frag, info, deps):
        keys = p.get("keys")
        out = []
        for idx, kind_tag, gid in p["items"]:
            kind = Kind.VERTEX if kind_tag == "v" else Kind.EDGE
            if keys is None:
                header, rl, _ = self._prop_home(kind, gid)
                names = sorted(self.store.interner.name(c.key) for c in rl.iter_occupied())
                frag.record_read(("plist", gid), tuple(names))
            else:
                names = keys
            for key in names:
                found, value = self.visible_prop(frag, info, kind, gid, key, deps,
                                                 create_cell=keys is not None)
                out.append((idx, key, found, value))
        return out

    def _step_vertex_labels(self, p, frag, info, deps):
        out = []
        for idx, gid in p["items"]:
            header = self.store.vertices.get(gid)
            if header is None:
                raise InvariantError(f"label read on missing vertex {gid}")
            frag.record_read(item_vertex(gid), True)
            out.append((idx, self.store.interner.name(header.label)))
        return out

    # Mutations.

    def _step_add_vertex(self, p, frag, info, deps):
        txid = info[0]
        label = p.get("label") or "vertex"
        label_id = self.store.interner.intern(label)
        header = self.store.create_vertex(label_id, TimeField.of_txn(txid))
        frag.pending_headers.append(header)
        frag.record_write(item_vertex(header.gid))
        frag.record_write(item_table_scan(int(Kind.VERTEX)))
        frag.record_write(item_label_pred(int(Kind.VERTEX), label_id))
        props = dict(p.get("props") or ())
        frag.write_log.append(("vertex_add", header.gid, label, dict(props)))
        for key, value in props.items():
            self.write_prop(frag, info, Kind.VERTEX, header.gid, key, value)
        return [("v", header.gid)]

    def _step_add_edge_src(self, p, frag, info, deps):
        txid = info[0]
        src, dst, label = p["src"], p["dst"], p["label"]
        src_header = self.store.vertices.get(src)
        if src_header is None:
            raise AbortError(AbortReason.NOT_FOUND, f"vertex {src}")
        ok, dep = self.element_visible(frag, info, src_header, item_vertex(src))
        if dep:
            deps.append(dep)
        if not ok:
            raise AbortError(AbortReason.NOT_FOUND, f"vertex {src} not visible")
        egid = self.store.new_gid(Kind.EDGE)
        label_id = self.store.interner.intern(label)
        header = self.store.create_edge(egid, label_id, src, dst, TimeField.of_txn(txid))
        self.store.insert_edge_cell(src_header, dst, egid, OUT)
        frag.pending_headers.append(header)
        frag.record_write(item_edge(egid))
        frag.record_write(item_adjacency(src, OUT))
        frag.record_write(item_table_scan(int(Kind.EDGE)))
        frag.record_write(item_label_pred(int(Kind.EDGE), label_id))
        props = dict(p.get("props") or ())
        frag.write_log.append(("edge_add", egid, src, dst, label, dict(props)))
        for key, value in props.items():
            self.write_prop(frag, info, Kind.EDGE, egid, key, value)
        if shard_of(dst) == self.shard:
            self._attach_dst(frag, info, deps, egid, src, dst, label_id, mirror=False)
        return [("e", egid, src, dst, label)]

    def _step_add_edge_dst(self, p, frag, info, deps):
        label_id = self.store.interner.intern(p["label"])
        self._attach_dst(frag, info, deps, p["egid"], p["src"], p["dst"], label_id,
                         mirror=True)
        return []

    def _attach_dst(self, frag, info, deps, egid, src, dst, label_id, mirror):
        txid = info[0]
        dst_header = self.store.vertices.get(dst)
        if dst_header is None:
            raise AbortError(AbortReason.NOT_FOUND, f"vertex {dst}")
        ok, dep = self.element_visible(frag, info, dst_header, item_vertex(dst))
        if dep:
            deps.append(dep)
        if not ok:
            raise AbortError(AbortReason.NOT_FOUND, f"vertex {dst} not visible")
        if mirror:
            mh = self.store.create_edge(egid, label_id, src, dst,
                                        TimeField.of_txn(txid), mirror=True)
            frag.pending_headers.append(mh)
            frag.record_write(item_edge(egid))
        self.store.insert_edge_cell(dst_header, src, egid, IN)
        frag.record_write(item_adjacency(dst, IN))

    def _step_set_prop(self, p, frag, info, deps):
        key = p["key"]
        value = TOMBSTONE if p.get("remove") else p["value"]
        for idx, kind_tag, gid in p["items"]:
            kind = Kind.VERTEX if kind_tag == "v" else Kind.EDGE
            self.write_prop(frag, info, kind, gid, key, value)
        return [(idx,) for idx, *_ in p["items"]]

    def _step_remove_edge(self, p, frag, info, deps):
        """Runs on the owner shard and, for cross-shard edges, on the mirror."""
        egid = p["egid"]
        header = self.store.edges.get(egid)
        if header is None:
            raise AbortError(AbortReason.NOT_FOUND, f"edge {egid}")
        ok, dep = self.element_visible(frag, info, header, item_edge(egid))
        if dep:
            deps.append(dep)
        if not ok:
            raise AbortError(AbortReason.NOT_FOUND, f"edge {egid} not visible")
        self.lock_header(frag, header, info[0])
        ekind = int(Kind.EDGE)
        frag.record_write(item_edge(egid))
        frag.record_write(item_table_scan(ekind))
        frag.record_write(item_label_pred(ekind, header.label))
        if not header.mirror and header.ep_rows is not None:
            for cell in header.ep_rows.iter_occupied():
                newest = cell.chain.newest_settled()
                if newest is not None and newest.value is not TOMBSTONE:
                    frag.record_write(item_prop_pred(ekind, cell.key, newest.value))
        if header.mirror:
            frag.record_write(item_adjacency(header.dst, IN))
        else:
            frag.record_write(item_adjacency(header.src, OUT))
            if shard_of(header.dst) == self.shard:
                frag.record_write(item_adjacency(header.dst, IN))
            frag.write_log.append(("edge_del", egid, header.src, header.dst))
        return []

    def _step_remove_vertex(self, p, frag, info, deps):
        """Install the vertex deletion; report visible incident edges for cascade."""
        gid = p["gid"]
        header = self.store.vertices.get(gid)
        if header is None:
            raise AbortError(AbortReason.NOT_FOUND, f"vertex {gid}")
        ok, dep = self.element_visible(frag, info, header, item_vertex(gid))
        if dep:
            deps.append(dep)
        if not ok:
            raise AbortError(AbortReason.NOT_FOUND, f"vertex {gid} not visible")
        self.lock_header(frag, header, info[0])
        vkind = int(Kind.VERTEX)
        frag.record_write(item_vertex(gid))
        frag.record_write(item_table_scan(vkind))
        frag.record_write(item_label_pred(vkind, header.label))
        frag.record_write(("plist", gid))
        for cell in header.vp_rows.iter_occupied():
            newest = cell.chain.newest_settled()
            if newest is not None and newest.value is not TOMBSTONE:
                frag.record_write(item_prop_pred(vkind, cell.key, newest.value))

        def visible(eh):
            okv, depv = self._quiet_visible(eh, info)
            if depv:
                deps.append(depv)
            if okv:
                frag.record_read(item_edge(eh.gid), True)
            return okv

        triples = list(self.store.scan_adjacency(header, None, None, visible))
        for d in (OUT, IN):
            sub = tuple(sorted((e, n) for n, e, cd in triples if cd == d))
            frag.record_read(item_adjacency(gid, d), (sub, None))
        frag.write_log.append(("vertex_del", gid))
        incident = []
        seen = set()
        for neighbor, egid, cd in triples:
            if egid not in seen:
                seen.add(egid)
                eh = self.store.edges[egid]
                incident.append((egid, eh.src, eh.dst))
        return incident

    # Admin.

    def _step_admin_index(self, p, frag, info, deps):
        kind = Kind.VERTEX if p["kind"] == "vertex" else Kind.EDGE
        key_id = self.store.interner.intern(p["prop"])
        self.index.create(kind, key_id)
        table = self.store.vertices if kind == Kind.VERTEX else self.store.edges
        indexed = 0
        for gid, header in table.items():
            if kind == Kind.EDGE and header.mirror:
                continue
            if not (header.bt.is_commit and header.et.tag == TimeField.POS_INF):
                continue
            rl = header.vp_rows if kind == Kind.VERTEX else header.ep_rows
            cell = self.store.find_prop_cell(rl, key_id)
            if cell is None:
                continue
            newest = cell.chain.newest_settled()
            if newest is not None and newest.bt.is_commit and newest.value is not TOMBSTONE:
                self.index.add(kind, key_id, newest.value, gid)
                indexed += 1
        return [indexed]

    def _step_admin_stats(self, p, frag, info, deps):
        alive_v = sum(1 for h in self.store.vertices.values()
                      if h.bt.is_commit and h.et.tag == TimeField.POS_INF)
        alive_e = sum(1 for h in self.store.edges.values()
                      if not h.mirror and h.bt.is_commit and h.et.tag == TimeField.POS_INF)
        return [{
            "shard": self.shard,
            "vertices": alive_v,
            "edges": alive_e,
            "pool": self.store.pool.balance(),
            "recycled": dict(self.gc_recycled),
            "active_txns": len(self.oracle.active),
            "rct_entries": len(self.rct),
        }]


def _superseded_value(chain: VersionChain):
    newest = chain.newest_settled()
    if newest is None or newest.value is TOMBSTONE:
        return None
    return newest.value


def _finalize_header(header, txid: TxnId, ct, commit: bool) -> None:
    if commit:
        if header.bt.is_txn and header.bt.txn == txid:
            header.bt = TimeField.commit(ct)
        if header.et.is_txn and header.et.txn == txid:
            header.et = TimeField.commit(ct)
    else:
        if header.et.is_txn and header.et.txn == txid:
            header.et = TF_POS_INF
        if header.bt.is_txn and header.bt.txn == txid:
            header.bt = TimeField(TimeField.NEG_INF)


def _export_reads(frag: ShardTxnState) -> list:
    return [(item, rec[0], rec[2]) for item, rec in frag.reads.items()]


def _reply_type(req_type: str) -> str:
    return {STEP_DISPATCH: STEP_RESULT, RCT_QUERY: RCT_REPLY,
            TS_PROBE: TS_REPLY, CLIENT_REQUEST: CLIENT_REPLY}.get(req_type, STEP_RESULT)
