"""Version-chain unit tests, including the writer-status pre-read cases.

The naive oracle used throughout is a plain list of (begin, end, value)
committed versions; chain behavior must match it after any event sequence.
"""

import random

import pytest

from mvgraph.common import (
    TF_POS_INF,
    TOMBSTONE,
    AbortError,
    AbortReason,
    TimeField,
    Timestamp,
    TxnId,
)
from mvgraph.mvstore import (
    MVTuple,
    ReadMode,
    VersionChain,
    collect_obsolete,
    detach_tuples,
    finalize_abort,
    finalize_commit,
    get_visible_version,
    install_pending_version,
    resolve_existence,
)
from mvgraph.txn import TxnStatus


def ts(c, s=0):
    return Timestamp(c, s)


def committed_chain(*versions):
    """versions: (bt, et|None for PosInf, value)"""
    chain = VersionChain(owner=1)
    for bt, et, value in versions:
        chain.tuples.append(MVTuple(
            TimeField.commit(ts(bt)),
            TF_POS_INF if et is None else TimeField.commit(ts(et)),
            value))
    return chain


def probe_table(mapping):
    def probe(txid):
        return mapping[txid]
    return probe


W = TxnId(0, 1)
R = TxnId(1, 2)


def pending_pair_chain(value_old="a", value_new="b"):
    """Chain [10 -> Txn(W)]["Txn(W) -> PosInf"] as in an in-flight update."""
    chain = committed_chain((10, None, value_old))
    install_pending_version(chain, W, value_new)
    return chain


def test_single_committed_version():
    chain = committed_chain((10, None, "a"))
    r = get_visible_version(chain, ts(15), R, probe_table({}))
    assert r.found and r.value == "a" and r.dep is None


def test_before_first_version_not_found():
    chain = committed_chain((10, None, "a"))
    r = get_visible_version(chain, ts(5), R, probe_table({}))
    assert not r.found


def test_preread_case_execution_reads_current():
    chain = pending_pair_chain()
    probe = probe_table({W: (TxnStatus.EXECUTION, None)})
    r = get_visible_version(chain, ts(15), R, probe)
    assert r.found and r.value == "a" and r.dep is None


def test_preread_case_validation_prereads_new_with_dep():
    chain = pending_pair_chain()
    probe = probe_table({W: (TxnStatus.VALIDATION, ts(20))})
    r = get_visible_version(chain, ts(15), R, probe)
    assert r.found and r.value == "b"
    assert r.dep == W and r.prov == W


def test_preread_case_commit_reads_new():
    chain = pending_pair_chain()
    probe = probe_table({W: (TxnStatus.COMMIT, ts(14))})
    r = get_visible_version(chain, ts(15), R, probe)
    assert r.found and r.value == "b" and r.dep is None and r.prov == W


def test_preread_case_abort_reads_current():
    chain = pending_pair_chain()
    probe = probe_table({W: (TxnStatus.ABORT, None)})
    r = get_visible_version(chain, ts(15), R, probe)
    assert r.found and r.value == "a" and r.dep is None


def test_write_write_conflict_aborts_second_writer():
    chain = pending_pair_chain()
    with pytest.raises(AbortError) as exc:
        install_pending_version(chain, TxnId(2, 9), "c")
    assert exc.value.reason is AbortReason.WW_CONFLICT


def test_read_your_writes():
    chain = pending_pair_chain()
    r = get_visible_version(chain, ts(15), W, probe_table({}))
    assert r.found and r.value == "b"


def test_no_opt_aborts_on_unresolved_writer():
    chain = pending_pair_chain()
    for status in (TxnStatus.EXECUTION, TxnStatus.VALIDATION):
        probe = probe_table({W: (status, ts(20))})
        r = get_visible_version(chain, ts(15), R, probe, optimistic=False)
        assert r.must_abort and r.abort is AbortReason.PRE_READ
    # Resolved statuses still read normally without the optimization.
    r = get_visible_version(chain, ts(15), R,
                            probe_table({W: (TxnStatus.COMMIT, ts(14))}),
                            optimistic=False)
    assert r.found and r.value == "b"


def test_snapshot_mode_uses_commit_timestamp():
    chain = pending_pair_chain()
    # Committed at 20 is outside a bt=15 snapshot, inside a bt=25 snapshot.
    probe = probe_table({W: (TxnStatus.COMMIT, ts(20))})
    r = get_visible_version(chain, ts(15), R, probe, mode=ReadMode.SNAPSHOT)
    assert r.value == "a"
    r = get_visible_version(chain, ts(25), R, probe, mode=ReadMode.SNAPSHOT)
    assert r.value == "b"
    # A validating writer whose ct already precedes the snapshot is pre-read
    # with a commit dependency; one after the snapshot is simply invisible.
    probe = probe_table({W: (TxnStatus.VALIDATION, ts(20))})
    r = get_visible_version(chain, ts(25), R, probe, mode=ReadMode.SNAPSHOT)
    assert r.value == "b" and r.dep == W
    r = get_visible_version(chain, ts(15), R, probe, mode=ReadMode.SNAPSHOT)
    assert r.value == "a" and r.dep is None


def test_fresh_chain_pending_only_cases():
    chain = VersionChain(owner=2)
    install_pending_version(chain, W, "x")
    probe = probe_table({W: (TxnStatus.EXECUTION, None)})
    assert not get_visible_version(chain, ts(15), R, probe).found
    probe = probe_table({W: (TxnStatus.VALIDATION, ts(20))})
    r = get_visible_version(chain, ts(15), R, probe)
    assert r.found and r.value == "x" and r.dep == W
    probe = probe_table({W: (TxnStatus.COMMIT, ts(14))})
    assert get_visible_version(chain, ts(15), R, probe).value == "x"
    probe = probe_table({W: (TxnStatus.ABORT, None)})
    assert not get_visible_version(chain, ts(15), R, probe).found


def test_install_idempotent_overwrite():
    chain = committed_chain((10, None, "a"))
    install_pending_version(chain, W, "x")
    install_pending_version(chain, W, "y")
    assert len(chain.tuples) == 2
    assert chain.pending().value == "y"


def test_finalize_commit_rewrites_pair():
    chain = pending_pair_chain()
    finalize_commit(chain, W, ts(20))
    old, new = chain.tuples
    assert old.et.is_commit and old.et.ts == ts(20)
    assert new.bt.is_commit and new.bt.ts == ts(20)
    assert new.et.tag == TimeField.POS_INF


def test_finalize_boundary_inclusive_start_exclusive_end():
    chain = pending_pair_chain()
    finalize_commit(chain, W, ts(20))
    probe = probe_table({})
    for reader, expect in ((19, "a"), (20, "b"), (21, "b")):
        r = get_visible_version(chain, ts(reader), R, probe)
        assert r.value == expect, reader


def test_tombstone_reads_as_not_found():
    chain = committed_chain((10, None, "a"))
    install_pending_version(chain, W, TOMBSTONE)
    finalize_commit(chain, W, ts(20))
    probe = probe_table({})
    assert get_visible_version(chain, ts(19), R, probe).value == "a"
    assert not get_visible_version(chain, ts(20), R, probe).found
    assert not get_visible_version(chain, ts(25), R, probe).found


def test_finalize_abort_restores_current():
    chain = pending_pair_chain()
    finalize_abort(chain, W)
    probe = probe_table({})
    for reader in (11, 15, 100):
        assert get_visible_version(chain, ts(reader), R, probe).value == "a"


def test_abort_with_no_pending_is_noop():
    chain = committed_chain((10, None, "a"))
    finalize_abort(chain, TxnId(5, 5))
    assert len(chain.tuples) == 1


def test_double_finalize_commit_fatal():
    chain = pending_pair_chain()
    finalize_commit(chain, W, ts(20))
    with pytest.raises(Exception):
        finalize_commit(chain, W, ts(21))


def test_hundred_aborts_leave_hundred_neginf_tuples():
    chain = committed_chain((10, None, "a"))
    for i in range(100):
        w = TxnId(0, 100 + i)
        install_pending_version(chain, w, f"v{i}")
        finalize_abort(chain, w)
    garbage = collect_obsolete(chain, ts(0))
    assert len(garbage) == 100
    assert all(t.bt.tag == TimeField.NEG_INF for t in garbage)


def test_collect_obsolete_examples():
    chain = committed_chain((1, 5, "x"), (5, None, "y"))
    got = collect_obsolete(chain, ts(10))
    assert [t.value for t in got] == ["x"]
    assert collect_obsolete(chain, ts(3)) == []


def test_collect_obsolete_matches_filter_oracle():
    rng = random.Random(23)
    for _ in range(1000):
        n = rng.randrange(1, 8)
        bounds = sorted(rng.sample(range(1, 200), n + 1))
        versions = [(bounds[i], bounds[i + 1], i) for i in range(n - 1)]
        versions.append((bounds[n - 1], None, n - 1))
        chain = committed_chain(*versions)
        # Sprinkle aborted leftovers.
        for _ in range(rng.randrange(3)):
            t = MVTuple(TimeField(TimeField.NEG_INF), TF_POS_INF, "dead")
            chain.tuples.append(t)
        min_bt = ts(rng.randrange(1, 220))
        expect = [t for t in chain.tuples
                  if t.bt.tag == TimeField.NEG_INF
                  or (t.et.is_commit and t.et.ts < min_bt)]
        assert collect_obsolete(chain, min_bt) == expect


def test_detach_idempotent():
    chain = committed_chain((1, 5, "x"), (5, None, "y"))
    victims = collect_obsolete(chain, ts(10))
    assert detach_tuples(chain, victims) == 1
    assert detach_tuples(chain, victims) == 0
    assert len(chain.tuples) == 1


def test_chain_replay_matches_naive_oracle():
    """Random install/finalize interleavings equal a list-of-versions oracle."""
    rng = random.Random(5)
    for _ in range(200):
        chain = VersionChain(owner=3)
        oracle = []  # committed (bt, et, value); et None = open
        clock = 10
        for step in range(rng.randrange(1, 12)):
            w = TxnId(0, 1000 + step)
            val = f"v{step}"
            try:
                install_pending_version(chain, w, val)
            except AbortError:
                continue
            if rng.random() < 0.7:
                clock += rng.randrange(1, 5)
                finalize_commit(chain, w, ts(clock))
                if oracle:
                    oracle[-1] = (oracle[-1][0], clock, oracle[-1][2])
                oracle.append((clock, None, val))
            else:
                finalize_abort(chain, w)
        got = [(bt.counter, et.counter if et not in (None, "inf") else None, v)
               for bt, et, v in chain.committed_triples()]
        want = [(bt, et, v) for bt, et, v in oracle]
        assert got == want


def test_existence_resolution_for_headers():
    probe = probe_table({W: (TxnStatus.VALIDATION, ts(20)),
                         R: (TxnStatus.EXECUTION, None)})
    committed = TimeField.commit(ts(5))
    # Plain committed-alive header.
    assert resolve_existence(committed, TF_POS_INF, ts(10), R, probe).found
    # Deleted at 8: visible before, gone after (end-exclusive).
    gone = TimeField.commit(ts(8))
    assert resolve_existence(committed, gone, ts(7), R, probe).found
    assert not resolve_existence(committed, gone, ts(8), R, probe).found
    # Pending delete by a validating writer: pre-read the deletion.
    r = resolve_existence(committed, TimeField.of_txn(W), ts(10), R, probe)
    assert not r.found and r.dep == W
    # Pending create by a validating writer: pre-read the creation.
    r = resolve_existence(TimeField.of_txn(W), TF_POS_INF, ts(10), R, probe)
    assert r.found and r.dep == W
    # Own pending create is visible; own pending delete is not.
    assert resolve_existence(TimeField.of_txn(R), TF_POS_INF, ts(10), R, probe).found
    assert not resolve_existence(committed, TimeField.of_txn(R), ts(10), R, probe).found
