import random

import pytest

from mvgraph.common import (
    TF_POS_INF,
    InvariantError,
    Kind,
    LoadError,
    ResourceError,
    TimeField,
    Timestamp,
    TxnId,
    make_id,
    shard_of,
)
from mvgraph.storage import (
    IN,
    OUT,
    Interner,
    ShardStore,
    load_graph,
    partition_key,
)

COMMIT1 = TimeField.commit(Timestamp(1, 0))


def fresh_store(shard=0, row_cells=8, caps=None):
    return ShardStore(shard, Interner(), row_cells=row_cells, pool_capacity=caps)


def always_visible(header):
    return True


def test_create_vertex_monotone_ids():
    store = fresh_store()
    gids = [store.create_vertex(0, COMMIT1).gid for _ in range(10_000)]
    locals_ = [g & ((1 << 48) - 1) for g in gids]
    assert locals_ == list(range(10_000))


def test_row_capacity_boundary():
    store = fresh_store(row_cells=8)
    v = store.create_vertex(0, COMMIT1)
    for i in range(8):
        store.insert_edge_cell(v, 100 + i, 200 + i, OUT)
    assert v.edge_rows.rows == 1
    assert v.edge_rows.occupied == 8
    # 9th insert allocates a second row and lands in its slot 0.
    row_idx, slot = store.insert_edge_cell(v, 108, 208, OUT)
    assert (row_idx, slot) == (1, 0)
    assert v.edge_rows.rows == 2


def test_vacancy_reused_before_new_row():
    store = fresh_store(row_cells=4)
    v = store.create_vertex(0, COMMIT1)
    for i in range(4):
        store.insert_edge_cell(v, i, 50 + i, OUT)
    store.insert_edge_cell(v, 4, 54, OUT)           # row 1 slot 0
    assert store.vacate_edge_cell(v, 51)             # hole in row 0
    row_idx, slot = store.insert_edge_cell(v, 9, 59, OUT)
    assert (row_idx, slot) == (0, 1)
    assert v.edge_rows.rows == 2


def test_row_fill_matches_list_model():
    """Replay random insert/delete traffic against a naive list model."""
    rng = random.Random(41)
    for _ in range(50):
        width = rng.choice([2, 4, 8])
        store = fresh_store(row_cells=width)
        v = store.create_vertex(0, COMMIT1)
        model = []           # occupied edge ids, insertion semantics by slot
        next_edge = 1
        for _ in range(rng.randrange(5, 60)):
            if model and rng.random() < 0.4:
                victim = rng.choice(model)
                model.remove(victim)
                assert store.vacate_edge_cell(v, victim)
            else:
                store.insert_edge_cell(v, next_edge, next_edge, OUT)
                model.append(next_edge)
                next_edge += 1
        got = sorted(c.edge for c in v.edge_rows.iter_occupied())
        assert got == sorted(model)
        assert v.edge_rows.occupied == len(model)
        # New-row-only-after-full rule: rows never exceed the high-water bound.
        hw = v.edge_rows.high_water
        assert v.edge_rows.rows <= (hw + width - 1) // width + 1


def test_duplicate_edge_cell_is_invariant_error():
    store = fresh_store()
    v = store.create_vertex(0, COMMIT1)
    store.insert_edge_cell(v, 1, 2, OUT)
    with pytest.raises(InvariantError):
        store.insert_edge_cell(v, 1, 2, OUT)


def test_set_prop_cell_idempotent_and_capacity():
    store = fresh_store(row_cells=4)
    v = store.create_vertex(0, COMMIT1)
    c1 = store.set_prop_cell(v.gid, v.vp_rows, 7, Kind.VPROP)
    c2 = store.set_prop_cell(v.gid, v.vp_rows, 7, Kind.VPROP)
    assert c1 is c2
    for key in range(4):
        store.set_prop_cell(v.gid, v.vp_rows, 100 + key, Kind.VPROP)
    assert v.vp_rows.rows == 2  # key 7 plus four more overflows one 4-cell row
    store2 = fresh_store(row_cells=4)
    v2 = store2.create_vertex(0, COMMIT1)
    for key in range(4):
        store2.set_prop_cell(v2.gid, v2.vp_rows, key, Kind.VPROP)
    assert v2.vp_rows.rows == 1
    store2.set_prop_cell(v2.gid, v2.vp_rows, 99, Kind.VPROP)
    assert v2.vp_rows.rows == 2


def test_scan_adjacency_order_and_filters():
    store = fresh_store()
    v = store.create_vertex(0, COMMIT1)
    e1 = store.new_gid(Kind.EDGE)
    e2 = store.new_gid(Kind.EDGE)
    e3 = store.new_gid(Kind.EDGE)
    lbl_a, lbl_b = 1, 2
    store.create_edge(e1, lbl_a, v.gid, 11, COMMIT1)
    store.create_edge(e2, lbl_a, v.gid, 12, COMMIT1)
    store.create_edge(e3, lbl_b, 13, v.gid, COMMIT1)
    store.insert_edge_cell(v, 11, e1, OUT)
    store.insert_edge_cell(v, 12, e2, OUT)
    store.insert_edge_cell(v, 13, e3, IN)
    out = [(n, e) for n, e, d in store.scan_adjacency(v, OUT, None, always_visible)]
    assert out == [(11, e1), (12, e2)]
    both = list(store.scan_adjacency(v, None, None, always_visible))
    assert len(both) == 3
    only_b = [(n, e) for n, e, d in store.scan_adjacency(v, None, lbl_b, always_visible)]
    assert only_b == [(13, e3)]


def test_compaction_packs_and_frees_rows():
    store = fresh_store(row_cells=4)
    v = store.create_vertex(0, COMMIT1)
    for i in range(9):  # three rows
        store.insert_edge_cell(v, i, 30 + i, OUT)
    for e in (31, 32, 33, 34, 35, 36, 37):
        store.vacate_edge_cell(v, e)
    moved, freed = store.compact_rows(v.edge_rows)
    assert freed == 2
    assert v.edge_rows.rows == 1
    got = [c.edge for c in v.edge_rows.iter_occupied()]
    assert got == [30, 38]


def test_compaction_dense_noop():
    store = fresh_store(row_cells=4)
    v = store.create_vertex(0, COMMIT1)
    for i in range(4):
        store.insert_edge_cell(v, i, 60 + i, OUT)
    moved, freed = store.compact_rows(v.edge_rows)
    assert moved == 0 and freed == 0


def test_compaction_preserves_scan_set_random():
    rng = random.Random(99)
    for _ in range(30):
        store = fresh_store(row_cells=4)
        v = store.create_vertex(0, COMMIT1)
        live = []
        for i in range(rng.randrange(1, 25)):
            egid = store.new_gid(Kind.EDGE)
            store.create_edge(egid, 0, v.gid, 1000 + i, COMMIT1)
            store.insert_edge_cell(v, 1000 + i, egid, OUT)
            live.append((1000 + i, egid))
        for victim, egid in rng.sample(live, k=rng.randrange(len(live) + 1)):
            store.vacate_edge_cell(v, egid)
            live.remove((victim, egid))
        before = {(n, e) for n, e, d in store.scan_adjacency(v, None, None, always_visible)}
        store.compact_rows(v.edge_rows)
        after = {(n, e) for n, e, d in store.scan_adjacency(v, None, None, always_visible)}
        assert before == after == set(live)
        # Post-compaction: sorted ascending and exactly ceil(n/R) rows.
        seq = [c.neighbor for c in v.edge_rows.iter_occupied()]
        assert seq == sorted(seq)
        assert v.edge_rows.rows == (len(live) + 3) // 4


def test_pool_conservation_and_exhaustion():
    store = fresh_store(caps={"vertex": 3})
    for _ in range(3):
        store.create_vertex(0, COMMIT1)
    with pytest.raises(ResourceError):
        store.create_vertex(0, COMMIT1)
    balance = store.pool.balance()
    assert balance["vertex"] == 3
    census = store.census()
    assert census["counts"]["vertex"] == 3


def fixture_files(tmp_path, vertices, edges, vprops=(), eprops=()):
    paths = []
    for name, rows in (("v.tsv", vertices), ("e.tsv", edges),
                       ("vp.tsv", vprops), ("ep.tsv", eprops)):
        p = tmp_path / name
        p.write_text("".join("\t".join(map(str, r)) + "\n" for r in rows))
        paths.append(str(p))
    return paths


def test_load_empty_files(tmp_path):
    paths = fixture_files(tmp_path, [], [])
    stores = [ShardStore(i, Interner()) for i in range(2)]
    stats, _, _ = load_graph(stores, stores[0].interner, *paths)
    assert stats.as_dict() == {"V": 0, "E": 0, "VP": 0, "EP": 0}


def test_load_small_fixture_census(tmp_path):
    interner = Interner()
    stores = [ShardStore(i, interner) for i in range(2)]
    paths = fixture_files(
        tmp_path,
        [("a", "person"), ("b", "person"), ("c", "city")],
        [("e1", "a", "b", "knows"), ("e2", "b", "c", "livesIn")],
        [("a", "name", "s", "alice"), ("b", "age", "i", "30")],
        [("e1", "since", "i", "2020")],
    )
    stats, vmap, emap = load_graph(stores, interner, *paths)
    assert stats.as_dict() == {"V": 3, "E": 2, "VP": 2, "EP": 1}
    # Two-cell rule: each edge referenced by exactly one OUT and one IN cell.
    cells = []
    for store in stores:
        for v in store.vertices.values():
            for c in v.edge_rows.iter_occupied():
                cells.append((c.edge, c.direction))
    for egid in emap.values():
        assert cells.count((egid, OUT)) == 1
        assert cells.count((egid, IN)) == 1
    # Every vertex got an ori_id property.
    for key, gid in vmap.items():
        store = stores[shard_of(gid)]
        header = store.vertices[gid]
        cell = store.find_prop_cell(header.vp_rows, interner.lookup("ori_id"))
        assert cell.chain.tuples[0].value == key


def test_load_orders_edge_cells_ascending(tmp_path):
    interner = Interner()
    stores = [ShardStore(0, interner)]
    edges = [(f"e{i}", "hub", f"x{i}", "l") for i in range(20)]
    vertices = [("hub", "v")] + [(f"x{i}", "v") for i in range(20)]
    paths = fixture_files(tmp_path, vertices, edges)
    _, vmap, _ = load_graph(stores, interner, *paths)
    hub = stores[0].vertices[vmap["hub"]]
    out_cells = [c.neighbor for c in hub.edge_rows.iter_occupied() if c.direction == OUT]
    assert out_cells == sorted(out_cells)


def test_load_rejects_dangling_and_malformed(tmp_path):
    interner = Interner()
    paths = fixture_files(tmp_path, [("a", "v")], [("e1", "a", "zz", "l")])
    with pytest.raises(LoadError):
        load_graph([ShardStore(0, interner)], interner, *paths)
    p = tmp_path / "bad.tsv"
    p.write_text("just_one_field\n")
    with pytest.raises(LoadError) as exc:
        load_graph([ShardStore(0, Interner())], Interner(), str(p), *paths[1:])
    assert exc.value.line == 1


def test_partition_is_stable():
    assert partition_key("p1", 4) == partition_key("p1", 4)
    spread = {partition_key(f"k{i}", 4) for i in range(100)}
    assert spread == {0, 1, 2, 3}
