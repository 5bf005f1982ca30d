import random

import pytest

from mvgraph.common import (
    TF_NEG_INF,
    TF_POS_INF,
    TS_NEG_INF,
    TS_POS_INF,
    ConfigError,
    Kind,
    QueryTypeError,
    TimeField,
    Timestamp,
    TxnId,
    kind_of,
    local_of,
    make_id,
    prop_compare,
    prop_eq,
    shard_of,
    ts_compare,
)


def test_make_id_identity_case():
    gid = make_id(Kind.VERTEX, 0, 0)
    assert shard_of(gid) == 0
    assert kind_of(gid) == Kind.VERTEX
    assert local_of(gid) == 0


def test_make_id_field_roundtrip():
    gid = make_id(Kind.EDGE, 3, 7)
    assert shard_of(gid) == 3
    assert local_of(gid) == 7
    assert kind_of(gid) == Kind.EDGE


def test_make_id_random_roundtrip():
    rng = random.Random(7)
    for _ in range(1000):
        kind = Kind(rng.randrange(4))
        shard = rng.randrange(1 << 14)
        local = rng.randrange(1 << 48)
        gid = make_id(kind, shard, local)
        assert (kind_of(gid), shard_of(gid), local_of(gid)) == (kind, shard, local)


def test_make_id_overflow():
    with pytest.raises(ConfigError):
        make_id(Kind.VERTEX, 0, 1 << 48)
    with pytest.raises(ConfigError):
        make_id(Kind.VERTEX, 1 << 14, 0)


def test_ts_compare_tiebreak_on_shard():
    assert ts_compare(Timestamp(5, 0), Timestamp(5, 1)) == -1


def test_ts_compare_counter_dominates():
    assert ts_compare(Timestamp(4, 9), Timestamp(5, 0)) == -1


def test_ts_sort_matches_reference():
    rng = random.Random(11)
    stamps = [Timestamp(rng.randrange(1000), rng.randrange(16)) for _ in range(10_000)]
    expected = sorted(stamps, key=lambda t: (t.counter, t.shard))
    assert sorted(stamps) == expected


def test_ts_sentinels_bound_everything():
    rng = random.Random(3)
    for _ in range(100):
        t = Timestamp(rng.randrange(1, 1 << 60), rng.randrange(1 << 14))
        assert TS_NEG_INF < t < TS_POS_INF


def test_timefield_bounds_and_txn_pattern():
    ts = Timestamp(9, 2)
    assert TF_NEG_INF.bound() < TimeField.commit(ts).bound() < TF_POS_INF.bound()
    f = TimeField.of_txn(TxnId(1, 4))
    assert f.is_txn
    with pytest.raises(Exception):
        f.bound()


def test_prop_eq_cross_tag_false():
    assert not prop_eq(1, 1.0)
    assert not prop_eq(True, 1)
    assert not prop_eq("1", 1)
    assert prop_eq(3, 3)
    assert prop_eq("a", "a")
    assert prop_eq(None, None)


def test_prop_compare_cross_tag_raises():
    with pytest.raises(QueryTypeError):
        prop_compare(1, "a")
    assert prop_compare(1, 2) == -1
    assert prop_compare("b", "a") == 1
    assert prop_compare(2.0, 2.0) == 0
