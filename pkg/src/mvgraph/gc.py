"""Background reclamation: expired versions, aborted leftovers, empty rows.

One scanning pass per shard per period collects obsolete objects into
kind-homogeneous batches (each batch holds one kind of garbage, capped by a
per-kind threshold); batch execution recycles slots back into the memory
pool.  The safety horizon is the cluster-wide minimum over active begin
timestamps and per-shard clock floors, so nothing any active or future
reader could still see is ever detached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .common import GlobalId, InvariantError, Kind, TimeField, Timestamp, kind_of
from .mvstore import collect_obsolete, detach_tuples
from .storage import MemoryPool

EXPIRED = "ExpiredVersions"
ABORTED = "AbortedVersions"
EMPTY_ROWS = "EmptyRows"
RCT_PRUNE = "RctPrune"
INDEX_SWEEP = "IndexSweep"

SCAN_COST_US = 20
COST_PER_ITEM_US = 1


@dataclass
class GcConfig:
    period_ms: int = 100
    batch_versions: int = 1024
    batch_rows: int = 256
    batch_rct: int = 4096
    gc_threads: int = 2
    scan_threads: int = 1

    def __post_init__(self):
        for f in (self.period_ms, self.batch_versions, self.batch_rows,
                  self.batch_rct, self.gc_threads, self.scan_threads):
            if f <= 0:
                raise ValueError("gc configuration values must be positive")


@dataclass
class GcTask:
    kind: str
    batch: list
    created_at: Timestamp
    horizon: Timestamp


def config_of(cluster) -> GcConfig:
    cfg = cluster.config
    return GcConfig(cfg.gc_period_ms, cfg.gc_batch_versions, cfg.gc_batch_rows,
                    cfg.gc_batch_rct, cfg.gc_threads)


def scan_epoch(cluster, engine, horizon: Timestamp | None = None) -> list[GcTask]:
    """Collect this shard's obsolete objects into batched, kind-pure tasks."""
    gcfg = config_of(cluster)
    if horizon is None:
        horizon = cluster.safe_horizon()
    now_ts = Timestamp(engine.oracle.counter, engine.shard)
    expired: list = []
    aborted: list = []
    rows: list = []
    sweep: list = []

    for chain_id in list(engine.gc_chains):
        chain = engine.gc_chains[chain_id]
        for t in collect_obsolete(chain, horizon):
            entry = ("tuple", chain, t)
            if t.bt.tag == TimeField.NEG_INF:
                aborted.append(entry)
            else:
                expired.append(entry)
        if not _chain_can_expire(chain):
            del engine.gc_chains[chain_id]

    for gid in list(engine.gc_vertices):
        header = engine.store.vertices.get(gid)
        if header is None:
            del engine.gc_vertices[gid]
            continue
        dead_aborted = header.bt.tag == TimeField.NEG_INF
        dead_expired = header.et.is_commit and header.et.ts < horizon
        if not (dead_aborted or dead_expired):
            if header.et.tag == TimeField.POS_INF and not header.bt.is_txn:
                del engine.gc_vertices[gid]  # creation committed; nothing to reap
            continue
        if header.edge_rows.occupied:
            continue  # incident edges reclaim first; retry next epoch
        (aborted if dead_aborted else expired).append(("vertex", gid))
        sweep.append(("vertex", gid))

    for gid in list(engine.gc_edges):
        header = engine.store.edges.get(gid)
        if header is None:
            del engine.gc_edges[gid]
            continue
        dead_aborted = header.bt.tag == TimeField.NEG_INF
        dead_expired = header.et.is_commit and header.et.ts < horizon
        if not (dead_aborted or dead_expired):
            if header.et.tag == TimeField.POS_INF and not header.bt.is_txn:
                del engine.gc_edges[gid]
            continue
        (aborted if dead_aborted else expired).append(("edge", gid))
        sweep.append(("edge", gid))

    for header in engine.store.vertices.values():
        for rl in (header.edge_rows, header.vp_rows):
            if rl.rows and (rl.occupied == 0
                            or rl.occupied < rl.rows * engine.store.row_cells // 2):
                if rl.rows > (rl.occupied + engine.store.row_cells - 1) // max(
                        engine.store.row_cells, 1):
                    rows.append((header.gid, "edge" if rl.row_cls == "erow" else "prop"))

    prunable = sum(1 for e in engine.rct._entries.values()
                   if e.final and e.ct < horizon)

    tasks: list[GcTask] = []
    for kind, items, cap in ((EXPIRED, expired, gcfg.batch_versions),
                             (ABORTED, aborted, gcfg.batch_versions),
                             (EMPTY_ROWS, rows, gcfg.batch_rows),
                             (INDEX_SWEEP, sweep, gcfg.batch_versions)):
        for i in range(0, len(items), cap):
            tasks.append(GcTask(kind, items[i:i + cap], now_ts, horizon))
    if prunable:
        for i in range(0, prunable, gcfg.batch_rct):
            n = min(gcfg.batch_rct, prunable - i)
            tasks.append(GcTask(RCT_PRUNE, [n], now_ts, horizon))
    return tasks


def _chain_can_expire(chain) -> bool:
    committed = sum(1 for t in chain.tuples if t.bt.is_commit)
    leftovers = any(t.bt.tag == TimeField.NEG_INF for t in chain.tuples)
    return committed > 1 or leftovers


def run_gc_batch(cluster, engine, task: GcTask) -> dict:
    """Recycle one batch; targets already reclaimed by an earlier epoch are
    skipped and counted.  Never touches anything visible at the horizon."""
    recycled = 0
    skipped = 0
    pool: MemoryPool = engine.store.pool
    if task.kind in (EXPIRED, ABORTED):
        for entry in task.batch:
            if entry[0] == "tuple":
                _, chain, t = entry
                if t.detached:
                    skipped += 1
                    continue
                if not (t.bt.tag == TimeField.NEG_INF
                        or (t.et.is_commit and t.et.ts < task.horizon)):
                    raise InvariantError("GC attempted to reclaim a visible version")
                detach_tuples(chain, [t])
                pool.recycle("tuple", t)
                recycled += 1
            elif entry[0] == "vertex":
                recycled += _reap_vertex(engine, entry[1], task.horizon, skipped)
            else:
                recycled += _reap_edge(engine, entry[1])
    elif task.kind == EMPTY_ROWS:
        for gid, which in task.batch:
            header = engine.store.vertices.get(gid)
            if header is None:
                skipped += 1
                continue
            rl = header.edge_rows if which == "edge" else header.vp_rows
            moved, freed = engine.store.compact_rows(rl)
            recycled += freed
    elif task.kind == RCT_PRUNE:
        recycled = engine.rct.prune_below(task.horizon)
        _prune_tst(cluster, engine)
    elif task.kind == INDEX_SWEEP:
        for kind_tag, gid in task.batch:
            kind = Kind.VERTEX if kind_tag == "vertex" else Kind.EDGE
            for (k, key_id), buckets in engine.index.keys.items():
                if k != int(kind):
                    continue
                for group in list(buckets.values()):
                    if gid in group:
                        group.discard(gid)
                        recycled += 1
    engine.gc_recycled[task.kind] += recycled
    return {"recycled": recycled, "skipped": skipped}


def _reap_vertex(engine, gid: GlobalId, horizon: Timestamp, skipped: int) -> int:
    header = engine.store.vertices.get(gid)
    if header is None:
        return 0
    if header.edge_rows.occupied:
        return 0
    count = 0
    for rl in (header.edge_rows, header.vp_rows):
        for cell in list(rl.iter_occupied()):
            if cell.__class__.__name__ == "PropCell":
                for t in cell.chain.tuples:
                    if not t.detached:
                        t.detached = True
                        engine.store.pool.recycle("tuple", t)
                        count += 1
        row = rl.head
        while row is not None:
            nxt = row.next
            row.wipe()
            engine.store.pool.recycle(rl.row_cls, row)
            count += 1
            row = nxt
        rl.head, rl.rows, rl.occupied, rl.high_water = None, 0, 0, 0
    engine.store.drop_vertex(gid)
    engine.gc_vertices.pop(gid, None)
    return count + 1


def _reap_edge(engine, gid: GlobalId) -> int:
    header = engine.store.edges.get(gid)
    if header is None:
        return 0
    count = 0
    # Vacate this shard's cells referencing the edge.
    for anchor in (header.src, header.dst):
        vh = engine.store.vertices.get(anchor)
        if vh is not None:
            if engine.store.vacate_edge_cell(vh, gid):
                pass
    if not header.mirror and header.ep_rows is not None:
        for cell in list(header.ep_rows.iter_occupied()):
            for t in cell.chain.tuples:
                if not t.detached:
                    t.detached = True
                    engine.store.pool.recycle("tuple", t)
                    count += 1
        row = header.ep_rows.head
        while row is not None:
            nxt = row.next
            row.wipe()
            engine.store.pool.recycle("prow", row)
            count += 1
            row = nxt
        header.ep_rows.head, header.ep_rows.rows = None, 0
        header.ep_rows.occupied = header.ep_rows.high_water = 0
    engine.store.drop_edge(gid)
    engine.gc_edges.pop(gid, None)
    return count + 1


def _prune_tst(cluster, engine) -> None:
    now = cluster.runtime.now
    stale = [txid for txid, at in engine.terminal_at.items()
             if now - at > 5_000_000]
    for txid in stale:
        engine.terminal_at.pop(txid, None)
        engine.tst.drop(txid)


def start_gc_tasks(cluster) -> None:
    """Periodic per-shard scan plus batched execution under the simulator.

    Scanning and batch execution occupy the shard's service time, so GC
    visibly competes with transaction traffic; the configured thread count
    divides batch cost to model parallel GC workers.
    """
    runtime = cluster.runtime
    gcfg = config_of(cluster)
    period_us = gcfg.period_ms * 1000

    def make_tick(engine):
        def tick():
            runtime.occupy(engine.shard, SCAN_COST_US)
            tasks = scan_epoch(cluster, engine)
            delay = 1
            for task in tasks:
                cost = max(1, len(task.batch) * COST_PER_ITEM_US // gcfg.gc_threads)

                def run(t=task, c=cost):
                    runtime.occupy(engine.shard, c)
                    run_gc_batch(cluster, engine, t)

                runtime.post(delay, run)
                delay += 1
            runtime.post(period_us, tick)
        return tick

    for engine in cluster.engines:
        runtime.post(period_us + engine.shard, make_tick(engine))
