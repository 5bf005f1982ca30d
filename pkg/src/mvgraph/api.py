"""Embeddable cluster facade: construction, loading, query submission, audits."""

from __future__ import annotations

import math
from typing import Callable, Optional

from .common import (
    TS_POS_INF,
    GlobalId,
    InvariantError,
    Kind,
    TimeField,
    Timestamp,
    kind_of,
    shard_of,
)
from .cluster import (
    CLIENT_NODE,
    CLIENT_REQUEST,
    ClusterConfig,
    Envelope,
    Request,
    RequestAll,
    SimRuntime,
    assign_coordinator,
)
from .engine import ShardEngine
from .storage import IN, OUT, Interner, load_graph
from .txn import Isolation, TxnCtx, TxnId, TxnStatus


class GraphCluster:
    """A full cluster in one process, driven by the simulation runtime."""

    def __init__(self, config: Optional[ClusterConfig] = None):
        self.config = config or ClusterConfig()
        self.interner = Interner()
        self.runtime = SimRuntime(self.config.seed)
        self.engines = [ShardEngine(self, s) for s in range(self.config.shards)]
        for engine in self.engines:
            self.runtime.register_handler(engine.shard, engine.handle)
        self._assign = 0
        self._indexed_v: set[str] = {"ori_id"}
        self._indexed_e: set[str] = set()
        self._gc_started = False
        self.vmap: dict[str, GlobalId] = {}
        self.emap: dict[str, GlobalId] = {}

    # -- planner metadata ---------------------------------------------------------

    @property
    def indexed_vertex_keys(self) -> frozenset:
        return frozenset(self._indexed_v)

    @property
    def indexed_edge_keys(self) -> frozenset:
        return frozenset(self._indexed_e)

    def note_index(self, kind: str, prop: str) -> None:
        (self._indexed_v if kind == "vertex" else self._indexed_e).add(prop)

    # -- data loading --------------------------------------------------------------

    def load(self, vertex_file: str, edge_file: str, vprop_file: str, eprop_file: str):
        stats, vmap, emap = load_graph([e.store for e in self.engines], self.interner,
                                       vertex_file, edge_file, vprop_file, eprop_file)
        self.vmap, self.emap = vmap, emap
        for engine in self.engines:
            engine._step_admin_index({"kind": "vertex", "prop": "ori_id"},
                                     None, None, [])
        return stats

    # -- client driving ---------------------------------------------------------------

    def submit(self, query: str, isolation: str = "SR", capture: bool = False,
               template: Optional[str] = None,
               on_done: Optional[Callable[[dict], None]] = None,
               coordinator: Optional[int] = None) -> None:
        """Queue one client request; the reply callback fires when it completes."""
        if coordinator is None:
            coordinator = assign_coordinator(self._assign, self.config.shards)
            self._assign += 1
        payload = {"query": query, "isolation": isolation,
                   "capture": capture, "template": template}

        def session():
            env = yield Request(coordinator, CLIENT_REQUEST, payload,
                                sender=CLIENT_NODE)
            if on_done is not None:
                on_done(env.payload)

        self.runtime.spawn(session())

    def execute(self, query: str, isolation: str = "SR", capture: bool = False) -> dict:
        """Submit one request and run the scheduler until it completes."""
        box: list[dict] = []
        self.submit(query, isolation, capture, on_done=box.append)
        self.runtime.run(stop_when=lambda: bool(box))
        if not box:
            raise InvariantError("scheduler drained without a client reply")
        return box[0]

    def khop(self, start_key: str, k: int) -> dict:
        """Multiplicity-counted repeated both() expansion from one vertex."""
        gid = self.vmap.get(start_key)
        if gid is None:
            return {"touched": [0] * (k + 1), "found": False}
        box: list[dict] = []
        coordinator = assign_coordinator(self._assign, self.config.shards)
        self._assign += 1

        def session():
            env = yield Request(coordinator, CLIENT_REQUEST,
                                {"khop": {"start": gid, "k": k}}, sender=CLIENT_NODE)
            box.append(env.payload)

        self.runtime.spawn(session())
        self.runtime.run(stop_when=lambda: bool(box))
        return box[0]

    # -- background work ------------------------------------------------------------

    def start_gc(self) -> None:
        from .gc import start_gc_tasks

        if not self._gc_started and self.config.gc_enabled:
            start_gc_tasks(self)
            self._gc_started = True

    # -- cluster-level timestamps -----------------------------------------------------

    def global_min_bt(self) -> Timestamp:
        """Minimum active begin timestamp across shards; PosInf when idle."""
        mins = [e.oracle.min_active() for e in self.engines]
        mins = [m for m in mins if m is not None]
        return min(mins) if mins else TS_POS_INF

    def safe_horizon(self) -> Timestamp:
        """GC horizon: below every active and every future begin timestamp."""
        bounds = []
        for e in self.engines:
            m = e.oracle.min_active()
            bounds.append(m if m is not None else e.oracle.floor())
        return min(bounds)

    # -- audits -----------------------------------------------------------------------

    def pool_balance(self) -> dict:
        total: dict[str, int] = {}
        for e in self.engines:
            for k, v in e.store.pool.balance().items():
                total[k] = total.get(k, 0) + v
        return total

    def census(self) -> dict:
        """Full-store invariant sweep; returns counts and violations."""
        violations: list[str] = []
        cells: dict[tuple, int] = {}
        pool_ok = True
        for engine in self.engines:
            store = engine.store
            result = store.census()
            violations.extend(result["chain_violations"])
            balance = store.pool.balance()
            for cls, count in result["counts"].items():
                if balance[cls] != count:
                    pool_ok = False
                    violations.append(
                        f"shard {engine.shard}: pool {cls} balance {balance[cls]} != live {count}")
            for header in store.vertices.values():
                for rl in (header.edge_rows, header.vp_rows):
                    if rl.high_water and rl.rows > math.ceil(rl.high_water / store.row_cells):
                        violations.append(
                            f"shard {engine.shard}: row bound violated on {header.gid}")
                for cell in header.edge_rows.iter_occupied():
                    cells[(cell.edge, cell.direction)] = \
                        cells.get((cell.edge, cell.direction), 0) + 1
        for engine in self.engines:
            for gid, eh in engine.store.edges.items():
                if eh.mirror:
                    continue
                if eh.bt.is_commit and eh.et.tag == TimeField.POS_INF:
                    if cells.get((gid, OUT), 0) != 1 or cells.get((gid, IN), 0) != 1:
                        violations.append(
                            f"edge {gid}: cells out={cells.get((gid, OUT), 0)} "
                            f"in={cells.get((gid, IN), 0)}")
        return {"violations": violations, "pool_ok": pool_ok,
                "pool": self.pool_balance()}

    def dump_state(self) -> dict:
        """Committed latest state of the whole graph (checker ground truth).

        Only meaningful at quiescent points (no in-flight transactions).
        """
        from .common import TOMBSTONE

        vertices = {}
        edges = {}
        for engine in self.engines:
            store = engine.store
            for gid, h in store.vertices.items():
                if not (h.bt.is_commit and h.et.tag == TimeField.POS_INF):
                    continue
                props = {}
                for cell in h.vp_rows.iter_occupied():
                    newest = cell.chain.newest_settled()
                    if newest is not None and newest.bt.is_commit \
                            and newest.value is not TOMBSTONE:
                        props[store.interner.name(cell.key)] = newest.value
                vertices[gid] = {"label": store.interner.name(h.label), "props": props}
            for gid, h in store.edges.items():
                if h.mirror:
                    continue
                if not (h.bt.is_commit and h.et.tag == TimeField.POS_INF):
                    continue
                props = {}
                for cell in h.ep_rows.iter_occupied():
                    newest = cell.chain.newest_settled()
                    if newest is not None and newest.bt.is_commit \
                            and newest.value is not TOMBSTONE:
                        props[store.interner.name(cell.key)] = newest.value
                edges[gid] = {"label": store.interner.name(h.label),
                              "src": h.src, "dst": h.dst, "props": props}
        return {"vertices": vertices, "edges": edges}
