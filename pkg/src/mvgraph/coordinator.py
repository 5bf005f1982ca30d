"""Transaction coordination and the embeddable cluster facade.

The coordinator task is a generator driven by the runtime: every yield is a
message exchange (or sleep), every resume happens with the replies.  The
same task code therefore runs identically under the deterministic simulator
and the socket-backed runtime.
"""

from __future__ import annotations

from typing import Optional

from .common import (
    TOMBSTONE,
    TS_POS_INF,
    AbortError,
    AbortReason,
    GraphError,
    InvariantError,
    Kind,
    ParseError,
    PlanError,
    QueryTypeError,
    Timestamp,
    TxnId,
    prop_compare,
    prop_eq,
    shard_of,
)
from .cluster import (
    CLIENT_NODE,
    CLIENT_REQUEST,
    RCT_INSERT,
    RCT_QUERY,
    STATUS_UPDATE,
    STEP_DISPATCH,
    TS_PROBE,
    ClusterConfig,
    Envelope,
    Request,
    RequestAll,
    SimRuntime,
    Sleep,
    assign_coordinator,
)
from .query import K_VERTEX, Pipeline, Plan, parse, parse_admin, plan as plan_pipeline
from .storage import IN, OUT, load_graph
from .txn import Isolation, TxnCtx, TxnStatus

_ABORT_BY_VALUE = {r.value: r for r in AbortReason}


class ExecState:
    """Coordinator-side view of one running transaction."""

    def __init__(self, engine, ctx: TxnCtx, snapshot: bool, capture: bool):
        self.engine = engine
        self.cluster = engine.cluster
        self.ctx = ctx
        self.snapshot = snapshot
        self.capture = capture
        self.history_reads: list = []
        self.history_writes: list = []

    def info_payload(self) -> dict:
        return {"txid": self.ctx.txid, "bt": self.ctx.bt, "snapshot": self.snapshot}

    def req(self, dest: int, mtype: str, payload: dict) -> Request:
        self.ctx.participants.add(dest)
        return Request(dest, mtype, payload, txid=self.ctx.txid,
                       sender=self.engine.shard, clock=self.engine.oracle.counter)

    def step_req(self, dest: int, op: str, **payload) -> Request:
        payload["op"] = op
        payload.update(self.info_payload())
        return self.req(dest, STEP_DISPATCH, payload)

    def absorb(self, env: Envelope) -> dict:
        self.engine.oracle.observe(env.clock)
        p = env.payload
        if p.get("abandoned"):
            raise AbortError(AbortReason.VALIDATION, "abandoned after abort")
        if "abort" in p and p["abort"]:
            raise AbortError(_ABORT_BY_VALUE[p["abort"]], p.get("detail", ""))
        for dep in p.get("deps", ()):
            self.ctx.add_commit_dep(dep)
        if p.get("w"):
            self.ctx.write_shards.add(env.sender)
        if p.get("r"):
            self.ctx.read_shards.add(env.sender)
        return p


def client_request_task(engine, env: Envelope):
    """Entry point for one client request on its coordinator shard."""
    runtime = engine.cluster.runtime
    started = runtime.now
    payload = env.payload
    try:
        if "khop" in payload:
            reply = yield from _run_khop(engine, payload["khop"])
        elif (admin := parse_admin(payload.get("query", ""))) is not None:
            rows = yield from _run_admin(engine, admin)
            reply = {"status": "OK", "reason": None, "rows": rows}
        else:
            reply = yield from run_transaction(engine, payload)
    except (ParseError, PlanError, QueryTypeError) as exc:
        reply = {"status": "ERROR", "reason": str(exc), "rows": []}
    reply["latency_us"] = runtime.now - started
    engine.reply(env, reply)


def _run_khop(engine, spec: dict):
    """Repeated both() expansion with multiplicity counting (read-only)."""
    txid = TxnId(engine.shard, next(engine.txn_seq))
    bt = engine.oracle.next_timestamp()
    engine.oracle.register(bt)
    engine.tst.ensure(txid, bt)
    ctx = TxnCtx(txid, Isolation.SR, bt, engine.shard, read_only_hint=True)
    ec = ExecState(engine, ctx, snapshot=True, capture=False)
    frontier = {spec["start"]: 1}
    touched = [1]
    try:
        for _ in range(spec["k"]):
            groups: dict[int, list] = {}
            for gid, count in frontier.items():
                groups.setdefault(shard_of(gid), []).append((gid, count))
            replies = yield RequestAll([
                ec.step_req(shard, "adjacency_counted", items=sorted(items))
                for shard, items in sorted(groups.items())])
            frontier = {}
            hop_touched = 0
            for env in replies:
                p = ec.absorb(env)["out"]
                hop_touched += p["touched"]
                for gid, count in p["frontier"]:
                    frontier[gid] = frontier.get(gid, 0) + count
            touched.append(hop_touched)
        ctx.ct = engine.oracle.next_timestamp()
        engine.tst.update(ctx.txid, TxnStatus.VALIDATION, ctx.bt, ctx.ct)
        yield from _resolve_dependencies(ec)
        yield from _commit(ec)
    except AbortError as exc:
        yield from _abort(ec, exc.reason)
        return {"status": "ABORT", "reason": exc.reason.value, "rows": []}
    cumulative = [sum(touched[1:k + 1]) if k else 1 for k in range(len(touched))]
    return {"status": "OK", "reason": None, "touched": cumulative,
            "rows": [{"k": i, "touched": t} for i, t in enumerate(cumulative)]}


def _run_admin(engine, admin: dict):
    cluster = engine.cluster
    shards = range(cluster.config.shards)
    if admin["op"] == "index_create":
        replies = yield RequestAll([
            Request(s, STEP_DISPATCH,
                    {"op": "admin_index", "kind": admin["kind"], "prop": admin["prop"]},
                    sender=engine.shard, clock=engine.oracle.counter)
            for s in shards])
        cluster.note_index(admin["kind"], admin["prop"])
        total = sum(env.payload["out"][0] for env in replies)
        return [{"indexed": total}]
    if admin["op"] == "stats":
        replies = yield RequestAll([
            Request(s, STEP_DISPATCH, {"op": "admin_stats"},
                    sender=engine.shard, clock=engine.oracle.counter)
            for s in shards])
        return [env.payload["out"][0] for env in sorted(replies, key=lambda e: e.sender)]
    raise InvariantError(f"unknown admin op {admin!r}")


def run_transaction(engine, payload: dict):
    """Drive one transaction end to end; returns the client reply dict."""
    cluster = engine.cluster
    pipelines = parse(payload["query"])
    plans = [plan_pipeline(p, cluster.indexed_vertex_keys, cluster.indexed_edge_keys)
             for p in pipelines]
    iso = Isolation(payload.get("isolation", "SR"))
    read_only = not any(p.read_write for p in plans)

    txid = TxnId(engine.shard, next(engine.txn_seq))
    bt = engine.oracle.next_timestamp()
    engine.oracle.register(bt)
    engine.tst.ensure(txid, bt)
    ctx = TxnCtx(txid, iso, bt, engine.shard, read_only)
    snapshot = iso is Isolation.SI or read_only
    ec = ExecState(engine, ctx, snapshot, payload.get("capture", False))

    rows = []
    try:
        for pl in plans:
            rows.extend((yield from execute_plan(ec, pl)))
        yield from _finish(ec)
    except AbortError as exc:
        yield from _abort(ec, exc.reason)
        reply = {"status": "ABORT", "reason": exc.reason.value, "rows": []}
        _attach_history(ec, reply, "abort", exc.reason.value, payload)
        return reply
    except QueryTypeError:
        yield from _abort(ec, AbortReason.TYPE_ERROR)
        raise
    reply = {"status": "OK", "reason": None, "rows": rows}
    _attach_history(ec, reply, "commit", None, payload)
    return reply


def _attach_history(ec: ExecState, reply: dict, outcome: str, reason, payload) -> None:
    ctx = ec.ctx
    reply["txid"] = ctx.txid
    record = {
        "txid": ctx.txid,
        "bt": ctx.bt,
        "ct": ctx.ct,
        "isolation": ctx.isolation.value,
        "read_only": ctx.read_only,
        "outcome": outcome,
        "reason": reason,
        "template": payload.get("template"),
    }
    if ec.capture:
        record["reads"] = ec.history_reads
        record["writes"] = ec.history_writes
    reply["history"] = record


# -- lifecycle: validation, dependency resolution, commit/abort -------------------


def _finish(ec: ExecState):
    engine, ctx = ec.engine, ec.ctx
    cluster = engine.cluster
    if ctx.read_only:
        # A read-only transaction serializes at its snapshot; its commit
        # timestamp only orders bookkeeping.
        ctx.ct = engine.oracle.next_timestamp()
        engine.tst.update(ctx.txid, TxnStatus.VALIDATION, ctx.bt, ctx.ct)
    else:
        yield from _enter_validation(ec)
        if ctx.isolation is Isolation.SR:
            yield from _validate(ec)
        elif ctx.write_shards:
            # SI skips read validation but must still learn whether its
            # provisional publication arrived behind a conflicting scan.
            replies = yield RequestAll([
                ec.req(s, RCT_QUERY, {"bt": ctx.bt, "ct": ctx.ct, "fence_only": True})
                for s in sorted(ctx.write_shards)])
            for env in replies:
                if ec.absorb(env)["fenced"]:
                    raise AbortError(AbortReason.FENCED)
    yield from _resolve_dependencies(ec)
    yield from _commit(ec)


def _enter_validation(ec: ExecState):
    """Acquire the commit timestamp and publish the provisional write sets.

    The commit timestamp must exceed every active begin timestamp anywhere,
    otherwise a commit could slip inside a running snapshot; the probe round
    merges each shard's clock and active-set maximum into this oracle.
    """
    engine, ctx = ec.engine, ec.ctx
    cluster = engine.cluster
    others = [s for s in range(cluster.config.shards)]
    replies = yield RequestAll([
        ec.req(s, TS_PROBE, {"op": "max_active"}) for s in others])
    for env in replies:
        p = ec.absorb(env)
        if p["max_active"] is not None:
            engine.oracle.observe(p["max_active"].counter)
        engine.oracle.observe(p["clock"])
    own_max = engine.oracle.max_active()
    if own_max is not None:
        engine.oracle.observe(own_max.counter)
    ctx.ct = engine.oracle.next_timestamp()
    engine.tst.update(ctx.txid, TxnStatus.VALIDATION, ctx.bt, ctx.ct)
    _broadcast_status(ec, TxnStatus.VALIDATION)
    for s in sorted(ctx.write_shards):
        cluster.runtime.send(Envelope(RCT_INSERT, ctx.txid, engine.shard, s,
                                      {"ct": ctx.ct}, engine.oracle.counter))


def _validate(ec: ExecState):
    engine, ctx = ec.engine, ec.ctx
    targets = sorted(ctx.read_shards | ctx.write_shards)
    if not targets:
        return
    replies = yield RequestAll([
        ec.req(s, RCT_QUERY, {"bt": ctx.bt, "ct": ctx.ct}) for s in targets])
    for env in replies:
        p = ec.absorb(env)
        if p["fenced"]:
            raise AbortError(AbortReason.FENCED)
        if p["verdict"] == "fail":
            raise AbortError(AbortReason.VALIDATION, p.get("conflict", ""))
        for dep in p["deps"]:
            ctx.add_abort_dep(dep)
    if not ctx.deps_disjoint():
        raise AbortError(AbortReason.VALIDATION, "commit/abort dependency overlap")


def _resolve_dependencies(ec: ExecState):
    """Commit only when pre-read writers committed and validation rivals aborted.

    On a sustained mutual wait the transaction with the larger commit
    timestamp aborts, which makes the victim deterministic.
    """
    engine, ctx = ec.engine, ec.ctx
    cfg = engine.cluster.config
    undecided: dict[TxnId, Optional[Timestamp]] = {}
    rounds = 0
    while True:
        undecided.clear()
        for dep in sorted(ctx.commit_deps):
            status, ct = yield from _probe_status(ec, dep)
            if status == TxnStatus.ABORT:
                raise AbortError(AbortReason.COMMIT_DEP_FAILED, f"dep {dep} aborted")
            if status != TxnStatus.COMMIT:
                undecided[dep] = ct
        for dep in sorted(ctx.abort_deps):
            status, ct = yield from _probe_status(ec, dep)
            if status == TxnStatus.COMMIT:
                raise AbortError(AbortReason.ABORT_DEP_FAILED, f"dep {dep} committed")
            if status != TxnStatus.ABORT:
                undecided[dep] = ct
        if not undecided:
            return
        rounds += 1
        if rounds > cfg.dep_rounds:
            mine = ctx.ct if ctx.ct is not None else TS_POS_INF
            if any(ct is not None and ct < mine for ct in undecided.values()):
                raise AbortError(AbortReason.DEP_TIMEOUT, "mutual wait, larger ct yields")
            if rounds > 3 * cfg.dep_rounds:
                raise AbortError(AbortReason.DEP_TIMEOUT, "dependency never resolved")
        yield Sleep(cfg.dep_wait_us)


def _probe_status(ec: ExecState, dep: TxnId):
    engine = ec.engine
    if dep.shard == engine.shard:
        return engine.tst.probe(dep)
    env = yield ec.req(dep.shard, TS_PROBE, {"op": "status", "txid": dep})
    p = ec.absorb(env)
    return TxnStatus(p["status"]), p["ct"]


def _broadcast_status(ec: ExecState, status: TxnStatus) -> None:
    engine, ctx = ec.engine, ec.ctx
    payload = {"status": int(status), "bt": ctx.bt, "ct": ctx.ct}
    for s in sorted(ctx.participants):
        if s == engine.shard or s == CLIENT_NODE:
            continue
        engine.cluster.runtime.send(Envelope(
            STATUS_UPDATE, ctx.txid, engine.shard, s, payload, engine.oracle.counter))


def _commit(ec: ExecState):
    engine, ctx = ec.engine, ec.ctx
    engine.tst.update(ctx.txid, TxnStatus.COMMIT, ctx.bt, ctx.ct)
    engine.terminal_at.setdefault(ctx.txid, engine.cluster.runtime.now)
    _broadcast_status(ec, TxnStatus.COMMIT)
    engine.oracle.deregister(ctx.bt)
    yield from _finalize(ec, "finalize_commit")
    ctx.decided = True


def _abort(ec: ExecState, reason: AbortReason):
    engine, ctx = ec.engine, ec.ctx
    ctx.abort_reason = reason
    engine.tst.update(ctx.txid, TxnStatus.ABORT, ctx.bt)
    engine.terminal_at.setdefault(ctx.txid, engine.cluster.runtime.now)
    _broadcast_status(ec, TxnStatus.ABORT)
    engine.oracle.deregister(ctx.bt)
    yield from _finalize(ec, "finalize_abort")
    ctx.decided = False


def _finalize(ec: ExecState, op: str):
    engine, ctx = ec.engine, ec.ctx
    targets = sorted(s for s in ctx.participants if s != CLIENT_NODE)
    replies = yield RequestAll([
        ec.step_req(s, op, ct=ctx.ct) for s in targets])
    for env in sorted(replies, key=lambda e: e.sender):
        engine.oracle.observe(env.clock)
        p = env.payload
        if ec.capture:
            ec.history_reads.extend(p.get("reads", ()))
            ec.history_writes.extend(p.get("writes", ()))


# -- plan execution -----------------------------------------------------------------


def execute_plan(ec: ExecState, plan: Plan):
    frontier = yield from _source(ec, plan)
    frontier = yield from _run_steps(ec, frontier, plan.steps)
    rows = yield from _render(ec, frontier)
    return rows


def _source(ec: ExecState, plan: Plan):
    cluster = ec.cluster
    shards = range(cluster.config.shards)
    kind, arg = plan.source[0], plan.source[1] if len(plan.source) > 1 else None
    if plan.source[0] in ("V", "E") and arg is None:
        # Fuse the leading equality filters into the scan itself.
        preds, label = [], None
        while plan.steps:
            step = plan.steps[0]
            if step.name == "has":
                preds.append(step.args)
            elif step.name == "hasLabel" and label is None:
                label = step.args[0]
            else:
                break
            plan.steps.pop(0)
        op = "scan_vertices" if kind == "V" else "scan_edges"
        replies = yield RequestAll([
            ec.step_req(s, op, preds=preds, label=label) for s in shards])
        return _merge_scan(ec, replies)
    if kind in ("V_index", "E_index"):
        op_kind = "vertex" if kind == "V_index" else "edge"
        replies = yield RequestAll([
            ec.step_req(s, "index_lookup", kind=op_kind, key=plan.source[1],
                        value=plan.source[2]) for s in shards])
        return _merge_scan(ec, replies)
    if kind == "V":
        env = yield ec.step_req(shard_of(arg), "vertex_by_id", gid=arg)
        return [(ref, ()) for ref in ec.absorb(env)["out"]]
    if kind == "E":
        env = yield ec.step_req(shard_of(arg), "edge_by_id", gid=arg)
        return [(tuple(ref), ()) for ref in ec.absorb(env)["out"]]
    if kind == "addVertex":
        props = plan.source[1]
        label = dict(props).get("label")
        clean = tuple((k, v) for k, v in props if k != "label")
        env = yield ec.step_req(ec.engine.shard, "add_vertex", props=clean, label=label)
        return [(tuple(ref), ()) for ref in ec.absorb(env)["out"]]
    raise PlanError(f"unsupported source {plan.source!r}")


def _merge_scan(ec: ExecState, replies) -> list:
    frontier = []
    for env in sorted(replies, key=lambda e: e.sender):
        for ref in ec.absorb(env)["out"]:
            frontier.append((tuple(ref), ()))
    return frontier


def _run_steps(ec: ExecState, frontier, steps):
    for step in steps:
        handler = _COORD_STEPS.get(step.name)
        if handler is None:
            raise PlanError(f"no executor for step {step.name}")
        frontier = yield from handler(ec, frontier, step)
    return frontier


def _by_shard_elements(frontier):
    """Group frontier element refs by owning shard as (index, ...) items."""
    groups: dict[int, list] = {}
    for i, (ref, _) in enumerate(frontier):
        gid = ref[1]
        groups.setdefault(shard_of(gid), []).append((i, ref[0], gid))
    return groups


def _scatter(ec: ExecState, frontier, op: str, payload_of):
    """Dispatch one element-step to owning shards; returns indexed results."""
    groups = _by_shard_elements(frontier)
    reqs = []
    for shard, items in sorted(groups.items()):
        payload = payload_of(items)
        reqs.append(ec.step_req(shard, op, **payload))
    replies = yield RequestAll(reqs)
    indexed: dict[int, list] = {}
    for env in replies:
        out = ec.absorb(env)["out"]
        for entry in out:
            idx = entry[0]
            indexed.setdefault(idx, []).append(entry)
    return indexed


def _step_hop(ec: ExecState, frontier, step):
    direction = {"in": IN, "out": OUT, "both": None,
                 "inE": IN, "outE": OUT, "bothE": None}[step.name]
    want_edges = step.name.endswith("E")
    label = step.args[0] if step.args else None
    groups: dict[int, list] = {}
    for i, (ref, _) in enumerate(frontier):
        groups.setdefault(shard_of(ref[1]), []).append((i, ref[1]))
    reqs = [ec.step_req(shard, "adjacency", items=items, direction=direction,
                        label=label, want_edges=want_edges)
            for shard, items in sorted(groups.items())]
    replies = yield RequestAll(reqs)
    per_idx: dict[int, list] = {}
    for env in replies:
        for idx, results in ec.absorb(env)["out"]:
            per_idx[idx] = results
    out = []
    for i, (ref, bindings) in enumerate(frontier):
        for res in per_idx.get(i, ()):
            out.append((tuple(res), bindings))
    return out


def _step_vhop(ec: ExecState, frontier, step):
    # Edge-to-vertex moves resolve locally from the edge quad.
    out = []
    for ref, bindings in frontier:
        _, egid, src, dst, label = ref
        if step.name == "outV":
            out.append((("v", src), bindings))
        elif step.name == "inV":
            out.append((("v", dst), bindings))
        else:
            out.append((("v", src), bindings))
            out.append((("v", dst), bindings))
    return out
    yield  # pragma: no cover


def _read_props_map(ec: ExecState, frontier, keys):
    indexed = yield from _scatter(
        ec, frontier, "read_props",
        lambda items: {"items": items, "keys": keys})
    return indexed


def _step_has(ec: ExecState, frontier, step):
    key, value = step.args
    indexed = yield from _read_props_map(ec, frontier, [key])
    out = []
    for i, (ref, bindings) in enumerate(frontier):
        for (_, k, found, got) in indexed.get(i, ()):
            if found and prop_eq(got, value):
                out.append((ref, bindings))
    return out


def _step_has_label(ec: ExecState, frontier, step):
    want = step.args[0]
    vertex_items = [(i, rb) for i, rb in enumerate(frontier) if rb[0][0] == "v"]
    labels: dict[int, str] = {}
    if vertex_items:
        groups: dict[int, list] = {}
        for i, (ref, _) in vertex_items:
            groups.setdefault(shard_of(ref[1]), []).append((i, ref[1]))
        replies = yield RequestAll([
            ec.step_req(shard, "vertex_labels", items=items)
            for shard, items in sorted(groups.items())])
        for env in replies:
            for idx, name in ec.absorb(env)["out"]:
                labels[idx] = name
    out = []
    for i, (ref, bindings) in enumerate(frontier):
        name = ref[4] if ref[0] == "e" else labels.get(i)
        if name == want:
            out.append((ref, bindings))
    return out


def _step_values(ec: ExecState, frontier, step):
    key = step.args[0]
    indexed = yield from _read_props_map(ec, frontier, [key])
    out = []
    for i, (ref, bindings) in enumerate(frontier):
        for (_, k, found, got) in indexed.get(i, ()):
            if found:
                out.append((("val", got), bindings))
    return out


def _step_properties(ec: ExecState, frontier, step):
    keys = list(step.args) if step.args else None
    indexed = yield from _read_props_map(ec, frontier, keys)
    out = []
    for i, (ref, bindings) in enumerate(frontier):
        for (_, k, found, got) in indexed.get(i, ()):
            if found:
                out.append((("pv", k, got), bindings))
    return out


def _step_label(ec: ExecState, frontier, step):
    out = []
    vertex_idx = [(i, rb) for i, rb in enumerate(frontier) if rb[0][0] == "v"]
    labels: dict[int, str] = {}
    if vertex_idx:
        groups: dict[int, list] = {}
        for i, (ref, _) in vertex_idx:
            groups.setdefault(shard_of(ref[1]), []).append((i, ref[1]))
        replies = yield RequestAll([
            ec.step_req(shard, "vertex_labels", items=items)
            for shard, items in sorted(groups.items())])
        for env in replies:
            for idx, name in ec.absorb(env)["out"]:
                labels[idx] = name
    for i, (ref, bindings) in enumerate(frontier):
        name = ref[4] if ref[0] == "e" else labels[i]
        out.append((("val", name), bindings))
    return out


def _step_dedup(ec: ExecState, frontier, step):
    if step.args:
        key = step.args[0]
        indexed = yield from _read_props_map(ec, frontier, [key])
        seen = set()
        out = []
        for i, (ref, bindings) in enumerate(frontier):
            vals = indexed.get(i, ())
            marker = vals[0][3] if vals and vals[0][2] else None
            k = ("k", marker if not isinstance(marker, bool) else ("b", marker))
            if k not in seen:
                seen.add(k)
                out.append((ref, bindings))
        return out
    seen = set()
    out = []
    for ref, bindings in frontier:
        k = _identity(ref)
        if k not in seen:
            seen.add(k)
            out.append((ref, bindings))
    return out


def _identity(ref):
    if ref[0] in ("v",):
        return ("v", ref[1])
    if ref[0] == "e":
        return ("e", ref[1])
    if ref[0] == "val":
        v = ref[1]
        return ("val", ("b", v) if isinstance(v, bool) else v)
    if ref[0] == "pv":
        return ("pv", ref[1], ref[2])
    return ref


def _step_order(ec: ExecState, frontier, step):
    key, direction = step.args
    indexed = yield from _read_props_map(ec, frontier, [key])
    keyed = []
    for i, item in enumerate(frontier):
        vals = indexed.get(i, ())
        if vals and vals[0][2]:
            keyed.append((0, vals[0][3], i, item))
        else:
            keyed.append((1, None, i, item))
    present = [k for k in keyed if k[0] == 0]
    tags = {type(v).__name__ for _, v, _, _ in present}
    if len(tags) > 1:
        raise QueryTypeError(f"order({key}) over mixed value types {sorted(tags)}")
    present.sort(key=lambda e: e[1], reverse=direction == "desc")
    missing = [k for k in keyed if k[0] == 1]
    return [item for *_, item in present + missing]


def _step_limit(ec: ExecState, frontier, step):
    return frontier[:step.args[0]]
    yield  # pragma: no cover


def _step_count(ec: ExecState, frontier, step):
    return [(("count", len(frontier)), ())]
    yield  # pragma: no cover


def _step_as(ec: ExecState, frontier, step):
    tag = step.args[0]
    return [(ref, bindings + ((tag, ref),)) for ref, bindings in frontier]
    yield  # pragma: no cover


def _step_select(ec: ExecState, frontier, step):
    out = []
    for ref, bindings in frontier:
        bound = dict(bindings)
        if all(t in bound for t in step.args):
            row = ("row", tuple((t, bound[t]) for t in step.args))
            out.append((row, bindings))
    return out
    yield  # pragma: no cover


def _step_where(ec: ExecState, frontier, step):
    tag = step.args[0]
    out = []
    for ref, bindings in frontier:
        bound = dict(bindings)
        other = bound.get(tag)
        if other is None or _identity(other) != _identity(ref):
            out.append((ref, bindings))
    return out
    yield  # pragma: no cover


def _step_group_count(ec: ExecState, frontier, step):
    groups: dict = {}
    if step.args:
        key = step.args[0]
        indexed = yield from _read_props_map(ec, frontier, [key])
        for i in range(len(frontier)):
            vals = indexed.get(i, ())
            marker = vals[0][3] if vals and vals[0][2] else None
            groups[marker] = groups.get(marker, 0) + 1
    else:
        for ref, _ in frontier:
            marker = _identity(ref)
            groups[marker] = groups.get(marker, 0) + 1
    items = sorted(groups.items(), key=lambda kv: repr(kv[0]))
    return [(("group", k, n), ()) for k, n in items]


def _step_union(ec: ExecState, frontier, step):
    out = []
    for sub in step.subplans:
        branch = yield from _run_steps(ec, list(frontier), list(sub))
        out.extend(branch)
    return out


def _step_set_property(ec: ExecState, frontier, step):
    key, value = step.args
    yield from _scatter(ec, frontier, "set_prop",
                        lambda items: {"items": items, "key": key, "value": value})
    return frontier


def _step_remove_property(ec: ExecState, frontier, step):
    key = step.args[0]
    yield from _scatter(ec, frontier, "set_prop",
                        lambda items: {"items": items, "key": key, "value": None,
                                       "remove": True})
    return frontier


def _step_add_edge(ec: ExecState, frontier, step):
    dst, label, props = step.args
    out = []
    for ref, bindings in frontier:
        src = ref[1]
        env = yield ec.step_req(shard_of(src), "add_edge_src",
                                src=src, dst=dst, label=label, props=props)
        quad = tuple(ec.absorb(env)["out"][0])
        egid = quad[1]
        if shard_of(dst) != shard_of(src):
            env = yield ec.step_req(shard_of(dst), "add_edge_dst",
                                    egid=egid, src=src, dst=dst, label=label)
            ec.absorb(env)
        out.append((quad, bindings))
    return out


def _remove_edge_everywhere(ec: ExecState, egid, src, dst):
    owner = shard_of(egid)
    env = yield ec.step_req(owner, "remove_edge", egid=egid)
    ec.absorb(env)
    if shard_of(dst) != owner:
        env = yield ec.step_req(shard_of(dst), "remove_edge", egid=egid)
        ec.absorb(env)


def _step_remove_edge(ec: ExecState, frontier, step):
    for ref, _ in frontier:
        _, egid, src, dst, label = ref
        yield from _remove_edge_everywhere(ec, egid, src, dst)
    return []


def _step_remove_vertex(ec: ExecState, frontier, step):
    for ref, _ in frontier:
        gid = ref[1]
        env = yield ec.step_req(shard_of(gid), "remove_vertex", gid=gid)
        incident = ec.absorb(env)["out"]
        for egid, src, dst in incident:
            yield from _remove_edge_everywhere(ec, egid, src, dst)
    return []


_COORD_STEPS = {
    "in": _step_hop, "out": _step_hop, "both": _step_hop,
    "inE": _step_hop, "outE": _step_hop, "bothE": _step_hop,
    "inV": _step_vhop, "outV": _step_vhop, "bothV": _step_vhop,
    "has": _step_has, "hasLabel": _step_has_label,
    "values": _step_values, "properties": _step_properties,
    "label": _step_label, "dedup": _step_dedup, "order": _step_order,
    "limit": _step_limit, "count": _step_count, "as": _step_as,
    "select": _step_select, "where": _step_where, "groupCount": _step_group_count,
    "union": _step_union, "setProperty": _step_set_property,
    "removeProperty": _step_remove_property, "addEdge": _step_add_edge,
    "removeVertex": _step_remove_vertex, "removeEdge": _step_remove_edge,
}


# -- result rendering ----------------------------------------------------------------


def _collect_vertices(ref, acc: set):
    if ref[0] == "v":
        acc.add(ref[1])
    elif ref[0] == "e":
        acc.add(ref[2])
        acc.add(ref[3])
    elif ref[0] == "row":
        for _, sub in ref[1]:
            _collect_vertices(sub, acc)
    elif ref[0] == "group" and isinstance(ref[1], tuple):
        _collect_vertices(ref[1], acc)


def _render(ec: ExecState, frontier):
    need: set = set()
    for ref, _ in frontier:
        _collect_vertices(ref, need)
    names: dict[int, str] = {}
    if need:
        ordered = sorted(need)
        fake_frontier = [(("v", g), ()) for g in ordered]
        indexed = yield from _read_props_map(ec, fake_frontier, ["ori_id"])
        for i, gid in enumerate(ordered):
            vals = indexed.get(i, ())
            if vals and vals[0][2]:
                names[gid] = vals[0][3]
            else:
                names[gid] = f"#v{gid}"

    def show(ref):
        tag = ref[0]
        if tag == "v":
            return names[ref[1]]
        if tag == "e":
            return {"src": names[ref[2]], "dst": names[ref[3]], "label": ref[4]}
        if tag == "val":
            return ref[1]
        if tag == "pv":
            return {"key": ref[1], "value": ref[2]}
        if tag == "count":
            return ref[1]
        raise InvariantError(f"unrenderable ref {ref!r}")

    rows = []
    for ref, _ in frontier:
        if ref[0] == "row":
            rows.append({t: show(sub) for t, sub in ref[1]})
        elif ref[0] == "count":
            rows.append({"count": ref[1]})
        elif ref[0] == "group":
            key = ref[1]
            shown = show(key) if isinstance(key, tuple) and key and key[0] in (
                "v", "e", "val", "pv") else key
            rows.append({"group": shown, "count": ref[2]})
        elif ref[0] == "pv":
            rows.append({"key": ref[1], "value": ref[2]})
        elif ref[0] == "e":
            rows.append({"edge": show(ref)})
        elif ref[0] == "v":
            rows.append({"vertex": show(ref)})
        else:
            rows.append({"value": show(ref)})
    return rows
