import logging
import random

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from shardbatch.errors import InvalidArgumentError, MalformedFilterError, RecoveryError
from shardbatch.model import KEY_MAX, KEY_MIN, Filter, MetricDocument, ShardKey, make_doc_id, matches
from shardbatch.storage import RECORD_HEADER, SegmentStore, recover

FIELDS = ("timestamp", "node_id")


def mk(i, node="n0", ts=None, client=1):
    return MetricDocument(make_doc_id(client, i), node, 60 * i if ts is None else ts, {"metric_00": float(i)})


def grid(nodes, minutes, client=1):
    docs, i = [], 0
    for m in range(minutes):
        for n in range(nodes):
            docs.append(MetricDocument(make_doc_id(client, i), f"n{n}", 60 * m, {"metric_00": float(i)}))
            i += 1
    return docs


def ids(docs):
    return sorted(d.doc_id for d in docs)


def open_store(path, **kw):
    kw.setdefault("fsync", False)
    return SegmentStore(path, "metrics", FIELDS, **kw)


class TestInsert:
    def test_fresh(self, tmp_path):
        store = open_store(tmp_path)
        inserted, errors = store.insert_many([mk(i) for i in range(100)])
        assert len(inserted) == 100 and errors == []
        assert store.live_doc_count == 100

    def test_empty(self, tmp_path):
        assert open_store(tmp_path).insert_many([]) == ([], [])

    def test_duplicates_at_3_and_97(self, tmp_path):
        store = open_store(tmp_path)
        batch = [mk(i) for i in range(100)]
        store.insert_many([batch[3], batch[97]])
        inserted, errors = store.insert_many(batch)
        assert len(inserted) == 98
        assert [e.batch_index for e in errors] == [3, 97]
        assert all(e.code == "duplicate_key" for e in errors)
        found = list(store.find(Filter(node_ids={"n0"})))
        assert ids(found) == ids(batch)

    def test_duplicate_inside_batch(self, tmp_path):
        store = open_store(tmp_path)
        a = mk(1)
        inserted, errors = store.insert_many([a, mk(2), a])
        assert inserted == [0, 1] and [e.batch_index for e in errors] == [2]

    @settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.data())
    def test_unordered_completeness(self, tmp_path_factory, data):
        store = open_store(tmp_path_factory.mktemp("u"))
        pre = [mk(i) for i in range(30)]
        store.insert_many(pre)
        fresh = [mk(i) for i in range(30, 80)]
        n_dup = data.draw(st.integers(0, 10))
        batch = list(fresh)
        positions = sorted(data.draw(st.lists(st.integers(0, len(batch)), min_size=n_dup, max_size=n_dup)))
        dups = data.draw(st.lists(st.sampled_from(pre), min_size=n_dup, max_size=n_dup, unique_by=lambda d: d.doc_id))
        for pos, d in zip(reversed(positions), dups):
            batch.insert(pos, d)
        inserted, errors = store.insert_many(batch)
        assert len(inserted) + len(errors) == len(batch)
        err_idx = {e.batch_index for e in errors}
        pre_ids = {d.doc_id for d in pre}
        assert err_idx == {i for i, d in enumerate(batch) if d.doc_id in pre_ids}
        for i in inserted:
            assert list(store.find(Filter(doc_id=batch[i].doc_id))) == [batch[i]]


class TestFind:
    def test_time_window_two_docs(self, tmp_path):
        store = open_store(tmp_path)
        docs = [mk(i, ts=t) for i, t in enumerate(range(0, 3601, 60))]
        store.insert_many(docs)
        f = Filter(ts_lo=600, ts_hi=720)
        got = list(store.find(f))
        assert ids(got) == ids(d for d in docs if matches(d, f))
        assert len(got) == 2

    def test_empty_node_set_rejected(self, tmp_path):
        with pytest.raises(MalformedFilterError):
            list(open_store(tmp_path).find(Filter(node_ids=set())))

    def test_no_match(self, tmp_path):
        store = open_store(tmp_path)
        store.insert_many(grid(2, 10))
        assert list(store.find(Filter(node_ids={"zz"}))) == []

    def test_without_indexes_falls_back_to_scan(self, tmp_path):
        store = SegmentStore(tmp_path, "m", (), fsync=False)
        docs = grid(3, 20)
        store.insert_many(docs)
        f = Filter(node_ids={"n1"}, ts_lo=120, ts_hi=600)
        assert ids(store.find(f)) == ids(d for d in docs if matches(d, f))

    @settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.lists(st.integers(1, 60), min_size=1, max_size=5), st.randoms(use_true_random=False))
    def test_oracle_equivalence(self, tmp_path_factory, batch_sizes, rnd):
        store = open_store(tmp_path_factory.mktemp("o"))
        all_docs, counter = [], 0
        for size in batch_sizes:
            batch = []
            for _ in range(size):
                batch.append(mk(counter, node=f"n{rnd.randrange(6)}", ts=60 * rnd.randrange(50)))
                counter += 1
            if all_docs and rnd.random() < 0.5:
                batch.append(rnd.choice(all_docs))
            inserted, _ = store.insert_many(batch)
            all_docs.extend(batch[i] for i in inserted)
        for _ in range(10):
            lo = 60 * rnd.randrange(50)
            f = Filter(
                node_ids={f"n{rnd.randrange(6)}" for _ in range(rnd.randint(1, 3))} if rnd.random() < 0.7 else None,
                ts_lo=lo if rnd.random() < 0.7 else None,
                ts_hi=lo + 60 * rnd.randint(1, 20),
            )
            assert ids(store.find(f)) == ids(d for d in all_docs if matches(d, f))


class TestIndexes:
    def test_create_on_empty(self, tmp_path):
        store = SegmentStore(tmp_path, "m", (), fsync=False)
        store.create_index("timestamp")
        assert len(store.indexes["timestamp"]) == 0

    def test_cardinality_after_10k(self, tmp_path):
        store = SegmentStore(tmp_path, "m", ("node_id",), fsync=False)
        store.insert_many(grid(10, 1000))
        store.create_index("timestamp")
        store.create_index("doc_id")
        for f in ("timestamp", "node_id", "doc_id"):
            assert len(store.indexes[f]) == store.live_doc_count == 10000
        store.insert_many([mk(99999, client=2)])
        assert all(len(ix) == 10001 for ix in store.indexes.values())

    def test_range_scan_ascending(self, tmp_path):
        store = open_store(tmp_path)
        rng = random.Random(1)
        store.insert_many([mk(i, ts=60 * rng.randrange(500)) for i in range(300)])
        rids = list(store.indexes["timestamp"].scan(6000, 18000))
        ts = [store.read(r).timestamp for r in rids]
        assert ts == sorted(ts) and all(6000 <= t < 18000 for t in ts)

    def test_unsupported_field(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            open_store(tmp_path).create_index("memory_use")


class TestSplitPoint:
    def test_under_threshold(self, tmp_path):
        store = open_store(tmp_path)
        store.insert_many([mk(i) for i in range(999)])
        assert store.split_point(KEY_MIN, KEY_MAX, 4096) is None

    def test_median(self, tmp_path):
        store = open_store(tmp_path)
        rng = random.Random(4)
        docs = [mk(i, node=f"n{rng.randrange(100):03d}", ts=60 * rng.randrange(10**6)) for i in range(5000)]
        store.insert_many(docs)
        key, lower, upper = store.split_point(KEY_MIN, KEY_MAX, 4096)
        keys = sorted(d.key for d in docs)
        # oracle: the middle element of the sorted keys
        assert key == keys[len(keys) // 2]
        below = sum(k < key for k in keys)
        assert (below, len(keys) - below) == (lower, upper)
        assert abs(lower - 2500) <= 1 and abs(upper - 2500) <= 1

    def test_single_key_unsplittable(self, tmp_path):
        store = open_store(tmp_path)
        store.insert_many([mk(i, ts=0) for i in range(5000)])
        assert store.split_point(KEY_MIN, KEY_MAX, 4096) is None

    def test_split_is_strictly_inside_subrange(self, tmp_path):
        store = open_store(tmp_path)
        store.insert_many(grid(10, 100))
        lo, hi = ShardKey("n2", 0), ShardKey("n5", 0)
        key, lower, upper = store.split_point(lo, hi, 100)
        assert lo < key < hi
        assert lower + upper == store.count_in_range(lo, hi) == 300


class TestRecover:
    def test_reload_10k(self, tmp_path):
        store = open_store(tmp_path)
        store.insert_many(grid(10, 1000))
        store.close()
        again = recover(tmp_path)
        assert again.live_doc_count == 10000
        assert set(again.indexes) == set(FIELDS)

    def test_torn_tail(self, tmp_path, caplog):
        store = open_store(tmp_path)
        docs = grid(10, 1000)
        store.insert_many(docs)
        store.close()
        seg = tmp_path / "seg-0.log"
        seg.write_bytes(seg.read_bytes()[:-7])
        with caplog.at_level(logging.WARNING):
            again = recover(tmp_path)
        assert again.live_doc_count == 9999
        assert "torn" in caplog.text
        assert ids(again.all_docs()) == ids(docs[:-1])
        # the truncated store keeps accepting writes
        again.insert_many([docs[-1]])
        again.close()
        assert recover(tmp_path).live_doc_count == 10000

    def test_torn_header(self, tmp_path):
        store = open_store(tmp_path)
        store.insert_many([mk(i) for i in range(5)])
        store.close()
        with open(tmp_path / "seg-0.log", "ab") as fh:
            fh.write(b"\x00\x00")
        assert recover(tmp_path).live_doc_count == 5

    def test_empty_dir(self, tmp_path):
        store = recover(tmp_path)
        assert store.live_doc_count == 0

    def test_corruption_in_middle_is_fatal(self, tmp_path):
        store = open_store(tmp_path)
        store.insert_many([mk(i) for i in range(10)])
        store.close()
        seg = tmp_path / "seg-0.log"
        data = bytearray(seg.read_bytes())
        data[RECORD_HEADER.size + 5] ^= 0xFF
        seg.write_bytes(bytes(data))
        with pytest.raises(RecoveryError):
            recover(tmp_path)

    def test_multiple_segments_and_sealed_corruption(self, tmp_path):
        store = open_store(tmp_path, segment_max_bytes=4096)
        docs = grid(4, 200)
        store.insert_many(docs[:400])
        store.insert_many(docs[400:])
        assert len(store.sealed) > 2
        store.close()
        again = recover(tmp_path, fsync=False)
        assert ids(again.all_docs()) == ids(docs)
        again.close()
        first = tmp_path / "seg-0.log"
        first.write_bytes(first.read_bytes()[:-3])
        with pytest.raises(RecoveryError):
            recover(tmp_path)

    def test_probe_filters_identical_after_recover(self, tmp_path):
        store = open_store(tmp_path)
        store.insert_many(grid(6, 300))
        probes = [
            Filter(node_ids={"n1"}),
            Filter(ts_lo=600, ts_hi=6000),
            Filter(node_ids={"n0", "n5"}, ts_lo=1200, ts_hi=1800),
            Filter(doc_id=make_doc_id(1, 17)),
        ]
        before = [ids(store.find(f)) for f in probes]
        store.close()
        again = recover(tmp_path)
        assert [ids(again.find(f)) for f in probes] == before
