import pytest

from rsmdb.harness.workload import ycsb_key
from rsmdb.procedures import USERTABLE
from rsmdb.recovery import RecoveryManager, states_agree


def full_diff(a, b, mark, tables):
    """Oracle: every (table, key) whose encoding differs between two saved snapshots."""
    out = set()
    for t in tables:
        sa, sb = a.saved[mark].snapshot, b.saved[mark].snapshot
        ra = {r.key: r.encode() for r in a.store.rows_at(sa, t)}
        rb = {r.key: r.encode() for r in b.store.rows_at(sb, t)}
        out |= {(t, k) for k in set(ra) | set(rb) if ra.get(k) != rb.get(k)}
    return out


def warm(c, n=200):
    c.submit_many(("update", (ycsb_key(i % c.workload.rows), b"field0", b"w%d" % i)) for i in range(n))
    assert c.wait_all(timeout=30)


@pytest.mark.parametrize("kind", ["update", "delete"])
def test_detect_and_minimal_repair(make_cluster, kind):
    c = make_cluster(replicas=4, workers=2, rows=800, partitions=4, signature="null")
    c.start()
    warm(c)
    c.inject_corruption(3, rows=40, leaves=4, kind=kind)
    rnd = c.recovery.run_detection_round()
    assert rnd.groups == [[0, 1, 2], [3]]
    assert rnd.majority == [0, 1, 2] and rnd.rest == [3]
    oracle = full_diff(c.replicas[3], c.replicas[0], rnd.mark, c.replicas[0].forests)
    assert len(oracle) == 40
    (report,) = c.recovery.handle_round(rnd)
    assert report.copied_keys == oracle
    assert report.digest_ok and report.leaves_repaired == 4
    if kind == "delete":
        assert report.rows_inserted == 40
    warm(c, 100)
    c.settle()
    assert c.states_equal()


def test_full_copy_fallback(make_cluster):
    c = make_cluster(replicas=3, rows=400, partitions=2, signature="null", full_copy_fraction=0.01)
    c.start()
    c.inject_corruption(2, rows=10, leaves=2)
    rnd = c.recovery.run_detection_round()
    (report,) = c.recovery.handle_round(rnd)
    assert report.full_copy_tables == [USERTABLE]
    assert report.rows_copied == 10
    assert c.wait_all(timeout=30) and c.states_equal()


def test_concurrent_repair_of_two(make_cluster):
    c = make_cluster(replicas=5, workers=2, rows=600, signature="null")
    c.start()
    c.inject_corruption(1, rows=20, leaves=2, seed=1)
    c.inject_corruption(4, rows=30, leaves=3, seed=2)
    rnd = c.recovery.run_detection_round()
    assert rnd.group_sizes == [3, 1, 1]
    reports = c.recovery.handle_round(rnd)
    assert sorted(r.corrupt for r in reports) == [1, 4]
    assert {r.corrupt: r.rows_copied for r in reports} == {1: 20, 4: 30}
    warm(c, 50)
    assert c.states_equal()


def test_choose_reference():
    assert RecoveryManager.choose_reference([[3], [0, 2], [1]]) == [0, 2]
    assert RecoveryManager.choose_reference([[2], [1], [3]]) == [1]
    assert RecoveryManager.choose_reference([[2, 3], [0, 1]]) == [0, 1]


def test_no_majority_escalates_to_sync(make_cluster):
    c = make_cluster(replicas=4, rows=500, signature="null")
    c.start()
    c.inject_corruption(2, rows=5, leaves=1, seed=1)
    c.inject_corruption(3, rows=5, leaves=1, seed=2)
    rnd = c.recovery.run_detection_round()
    assert rnd.group_sizes == [2, 1, 1] and rnd.majority is None
    reports = c.recovery.handle_round(rnd)
    assert sorted(r.corrupt for r in reports) == [2, 3]
    assert all(r.reference == 0 for r in reports)
    assert c.wait_all(timeout=30) and c.states_equal()


def test_nondeterminism_sync_converges(make_cluster):
    c = make_cluster(replicas=4, rows=200, signature="null")
    c.start()
    idx = c.inject_nondeterministic_tx()
    warm(c, 50)
    c.settle()
    flagged = c.aggregator.flagged()
    # later writes into the diverged partition keep disagreeing
    assert min(flagged) == idx
    assert set(flagged.values()) == {frozenset({3})}
    reports = c.recovery.recover_divergent_set([[0, 1, 2], [3]])
    assert [r.corrupt for r in reports] == [3] and reports[0].rows_copied == 1
    warm(c, 50)
    assert c.states_equal()


def test_recompute_then_repair_after_forest_tamper(make_cluster):
    c = make_cluster(replicas=4, rows=400, signature="null")
    c.start()
    c.inject_corruption(1, rows=6, leaves=2, mode="tm2")
    assert c.forests_consistent()[1] is False
    c.recovery.recompute_and_restart(1)
    assert c.forests_consistent()[1] is True
    rnd = c.recovery.run_detection_round()
    assert rnd.rest == [1]
    c.recovery.handle_round(rnd)
    warm(c, 30)
    assert c.states_equal()
    assert states_agree(c.replicas.values())
