"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import csv
import json
import random
import struct
import time
from collections import Counter
from contextlib import contextmanager

import pytest

from shardbatch import bench
from shardbatch import orchestrator as orch
from shardbatch.cli import main as cli_main
from shardbatch.client import RouterClient
from shardbatch.configsrv import ConfigStore
from shardbatch.errors import AuthError
from shardbatch.model import KEY_MAX, KEY_MIN, Filter, MetricDocument, ShardKey, make_doc_id, matches
from shardbatch.protocol import MESSAGE_TYPES, Connection, Envelope, FrameDecoder, decode, encode
from shardbatch.storage import SegmentStore, recover

from test_orchestrator import config, free_base_port, hosts


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def run(n, title):
        try:
            yield
        except BaseException as exc:
            with capsys.disabled():
                print(f"\nFAIL criterion {n}: {title} ({type(exc).__name__}: {str(exc)[:200]})")
            raise
        with capsys.disabled():
            print(f"\nPASS criterion {n}: {title}")

    return run


def test_01_role_assignment(criterion):
    with criterion(1, "assign_roles 32 -> (2,7,7,16), 64 -> (2,15,15,32) in < 1 s"):
        t0 = time.perf_counter()
        a32 = orch.assign_roles(hosts(32))
        a64 = orch.assign_roles(hosts(64))
        elapsed = time.perf_counter() - t0
        assert a32.counts() == (2, 7, 7, 16)
        assert a64.counts() == (2, 15, 15, 32)
        assert elapsed < 1.0


def test_02_days_table(criterion):
    with criterion(2, "days_for_nodes 32->3, 64->7, 128->14, 256->14"):
        assert [bench.days_for_nodes(n) for n in (32, 64, 128, 256)] == [3, 7, 14, 14]


def test_03_result_count_law(criterion, tmp_path):
    with criterion(3, "8 nodes x 3 days = 34,560 docs; 50 jobs return |nodes| x minutes; < 5 min"):
        t0 = time.perf_counter()
        topo = orch.assign_roles(hosts(8))
        handle = orch.launch(topo, config(tmp_path))
        try:
            nodes = bench.node_names(8)
            plan = bench.IngestPlan(8, 3, topo.client_nodes, handle.router_endpoints, pe_per_node=4)
            source = bench.generate_metrics(nodes, bench.WINDOW_START, 3, seed=1)
            ingest = bench.run_ingest(plan, source)
            assert ingest.total_docs == 8 * 3 * 1440 == 34560
            assert not ingest.errors
            jobs = bench.generate_jobs(50, nodes, bench.WINDOW_START, 3, seed=2)
            assert len(jobs) == 50
            report = bench.run_query_bench(jobs, handle.router_endpoints, concurrency=16)
        finally:
            orch.shutdown(handle)
        by_id = {j.job_id: j for j in jobs}
        for row in report.queries:
            job = by_id[row.job_id]
            # independent law: one document per node per minute
            assert row.returned_docs == len(job.node_ids) * ((job.end - job.start) // 60), row
            assert row.flag == "ok"
        assert len(report.queries) == 50
        assert time.perf_counter() - t0 < 300


def test_04_unordered_insert(criterion, make_cluster):
    with criterion(4, "200 randomized duplicate-injection trials"):
        cluster = make_cluster(n_shards=2, split_threshold=2000)
        rng = random.Random(404)
        with RouterClient(cluster.router_endpoint) as client:
            for trial in range(200):
                node = f"trial{trial:03d}"
                fresh = [
                    MetricDocument(make_doc_id(trial, i), node, 60 * rng.randrange(5000), {"m": float(i)})
                    for i in range(rng.randint(1, 60))
                ]
                pre = [MetricDocument(make_doc_id(trial, 10_000 + i), node, 60 * i, {"m": 0.0}) for i in range(20)]
                assert client.insert_many("metrics", pre).inserted_count == 20
                batch = list(fresh)
                for d in rng.sample(pre, rng.randint(0, 20)):
                    batch.insert(rng.randint(0, len(batch)), d)
                result = client.insert_many("metrics", batch)
                pre_ids = {d.doc_id for d in pre}
                dup_positions = {i for i, d in enumerate(batch) if d.doc_id in pre_ids}
                assert result.inserted_count + len(result.errors) == len(batch)
                assert {e.batch_index for e in result.errors} == dup_positions
                assert {e.code for e in result.errors} <= {"duplicate_key"}
                got = Counter(d.doc_id for d in client.find("metrics", Filter(node_ids={node})))
                assert got == Counter(d.doc_id for d in pre + fresh)


def doc_tuple(d):
    return (d.doc_id, d.node_id, d.timestamp, tuple(sorted(d.metrics.items())))


def test_05_oracle_equivalence(criterion, make_cluster):
    with criterion(5, ">= 100,000 docs, 2 shards, >= 3 splits, 100 filters match a linear scan"):
        cluster = make_cluster(n_shards=2, split_threshold=20000)
        rng = random.Random(505)
        nodes = [f"nid{i:05d}" for i in range(40)]
        docs = [
            MetricDocument(make_doc_id(7, i), rng.choice(nodes), 60 * rng.randrange(30 * 1440), {"m": rng.random()})
            for i in range(100_000)
        ]
        with RouterClient(cluster.router_endpoint) as client:
            for lo in range(0, len(docs), 1000):
                result = client.insert_many("metrics", docs[lo : lo + 1000])
                assert result.inserted_count == len(docs[lo : lo + 1000]) and not result.errors
            splits = len(cluster.shardmap().chunks) - 1
            assert splits >= 3, f"only {splits} splits"
            assert sum(cluster.live_counts().values()) == len(docs)
            for _ in range(100):
                kind = rng.random()
                node_ids = set(rng.sample(nodes, rng.randint(1, 5))) if kind < 0.7 else None
                ts_lo = 60 * rng.randrange(30 * 1440)
                ts_hi = ts_lo + 60 * rng.randint(1, 5 * 1440)
                if kind > 0.95:
                    f = Filter(doc_id=rng.choice(docs).doc_id)
                elif kind > 0.85:
                    f = Filter(node_ids=node_ids, ts_lo=ts_lo)
                else:
                    f = Filter(node_ids=node_ids, ts_lo=ts_lo, ts_hi=ts_hi)
                expected = Counter(doc_tuple(d) for d in docs if matches(d, f))
                got = Counter(doc_tuple(d) for d in client.find("metrics", f))
                assert got == expected, f


def test_06_metadata_partition(criterion):
    with criterion(6, "200 random splits over 4 shards keep a balanced partition"):
        rng = random.Random(606)
        store = ConfigStore()
        for i in range(4):
            store.register_shard(f"shard-{i}", f"127.0.0.1:{5000 + 10 * i}")
        store.create_collection("metrics")
        for _ in range(200):
            smap = store.meta.collections["metrics"]
            while True:
                chunk = rng.choice(smap.chunks)
                key = ShardKey(f"nid{rng.randrange(10**4):05d}", 60 * rng.randrange(10**6))
                if chunk.lo < key < chunk.hi:
                    break
            store.report_split("metrics", chunk.chunk_id, key)
        chunks = store.meta.collections["metrics"].chunks
        assert len(chunks) == 201
        assert chunks[0].lo == KEY_MIN and chunks[-1].hi == KEY_MAX
        assert all(a.hi == b.lo and a.lo < a.hi for a, b in zip(chunks, chunks[1:]))
        counts = Counter(c.owner_shard for c in chunks)
        assert set(counts) == {f"shard-{i}" for i in range(4)}
        assert max(counts.values()) - min(counts.values()) <= 1


def test_07_durability(criterion, tmp_path):
    with criterion(7, "shutdown/relaunch preserves probes; torn tail loses only the torn record"):
        cfg = config(tmp_path)
        topo = orch.assign_roles(hosts(8))
        rng = random.Random(707)
        docs = [
            MetricDocument(make_doc_id(3, i), f"nid{rng.randrange(8):05d}", 60 * rng.randrange(20000), {"m": 1.0})
            for i in range(6000)
        ]
        probes = [
            Filter(node_ids={"nid00001"}),
            Filter(ts_lo=0, ts_hi=60 * 5000),
            Filter(node_ids={"nid00002", "nid00005"}, ts_lo=60 * 1000, ts_hi=60 * 9000),
            Filter(doc_id=docs[123].doc_id),
            Filter(ts_lo=0),
        ]
        handle = orch.launch(topo, cfg)
        try:
            with RouterClient(handle.router_endpoints[0]) as client:
                acked = client.insert_many("metrics", docs).inserted_count
                before = [sorted(d.doc_id for d in client.find("metrics", f)) for f in probes]
        finally:
            orch.shutdown(handle)
        assert acked == len(docs) and len(before[-1]) == acked

        handle = orch.launch(topo, cfg)
        try:
            with RouterClient(handle.router_endpoints[0]) as client:
                after = [sorted(d.doc_id for d in client.find("metrics", f)) for f in probes]
        finally:
            orch.shutdown(handle)
        assert after == before

        store = SegmentStore(tmp_path / "torn", "metrics", ("timestamp", "node_id"), fsync=False)
        store.insert_many(docs)
        store.close()
        seg = tmp_path / "torn" / "seg-0.log"
        seg.write_bytes(seg.read_bytes()[:-5])
        again = recover(tmp_path / "torn")
        assert sorted(d.doc_id for d in again.all_docs()) == sorted(d.doc_id for d in docs[:-1])


def test_08_router_exclusive_access(criterion, make_cluster):
    with criterion(8, "direct shard request without token rejected; same request via router succeeds"):
        cluster = make_cluster(n_shards=2)
        doc = MetricDocument(make_doc_id(8, 0), "nid00000", 0, {"m": 1.0})
        payload = {"collection": "metrics", "docs": [doc.to_wire()]}
        for shard in cluster.shards:
            with Connection(shard.endpoint, None) as conn:
                with pytest.raises(AuthError):
                    conn.request("insert_batch", payload)
        with Connection(cluster.router_endpoint, None) as conn:
            assert conn.request("insert_batch", payload).payload["inserted_count"] == 1
        assert sum(cluster.live_counts().values()) == 1


def test_09_desk_scale_sweep(criterion, tmp_path, capsys):
    with criterion(9, "sweep over {1,2,4} shards in < 15 min with self-consistent docs_per_second"):
        report = tmp_path / "sweep.csv"
        t0 = time.perf_counter()
        with capsys.disabled():
            code = cli_main([
                "sweep", "--configs", "1,2,4",
                "--data-root", str(tmp_path / "sweep"),
                "--base-port", str(free_base_port(26)),
                "--report-out", str(report),
            ])
        elapsed = time.perf_counter() - t0
        assert code == 0
        assert elapsed < 15 * 60
        with open(report, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        assert header == list(bench.REPORT_HEADER)
        assert len(body) == 3 and all(len(r) == len(header) for r in body)
        records = [dict(zip(header, r)) for r in body]
        assert [r["config"] for r in records] == ["s1-r1-c4", "s2-r2-c8", "s4-r4-c16"]
        for shards, r in zip((1, 2, 4), records):
            assert r["errors"] == "0"
            # proportional volume: 4 synthetic nodes per shard for one day
            assert int(r["total_docs"]) == 4 * shards * 1440
            assert float(r["docs_per_second"]) == int(r["total_docs"]) / float(r["ingest_seconds"])


def _random_envelope(rng):
    def value(depth=0):
        kind = rng.randrange(7 if depth < 3 else 5)
        if kind == 0:
            return None
        if kind == 1:
            return rng.random() < 0.5
        if kind == 2:
            return rng.randint(-(2**62), 2**62)
        if kind == 3:
            return rng.uniform(-1e9, 1e9)
        if kind == 4:
            return "".join(chr(rng.choice([rng.randrange(32, 127), rng.randrange(0x400, 0x4FF), 0x1F600])) for _ in range(rng.randrange(12)))
        if kind == 5:
            return [value(depth + 1) for _ in range(rng.randrange(4))]
        return {f"k{i}": value(depth + 1) for i in range(rng.randrange(4))}

    payload = {f"f{i}": value() for i in range(rng.randrange(6))}
    token = rng.choice(["", "tok", "s3cret-é"])
    return Envelope(rng.choice(sorted(MESSAGE_TYPES)), rng.randrange(2**53), payload, token)


def test_10_wire_round_trip(criterion):
    with criterion(10, "1,000 envelopes round-trip, including fragmented delivery"):
        rng = random.Random(1010)
        envs = [_random_envelope(rng) for _ in range(1000)]
        frames = [encode(e) for e in envs]
        for env, frame in zip(envs, frames):
            # independent view of the frame: big-endian length then a JSON body
            (length,) = struct.unpack(">I", frame[:4])
            assert length == len(frame) - 4
            body = json.loads(frame[4:].decode("utf-8"))
            assert (body["type"], body["req_id"], body.get("payload", {})) == (env.type, env.req_id, env.payload)
            assert decode(frame) == env
        stream = b"".join(frames)
        # cut at every frame boundary and one byte either side, plus random cuts
        cuts, pos = set(), 0
        for frame in frames:
            cuts.update((pos - 1, pos + 1, pos + 3))
            pos += len(frame)
        cuts.update(rng.randrange(len(stream)) for _ in range(2000))
        cuts = sorted(c for c in cuts if 0 < c < len(stream))
        decoder, out, prev = FrameDecoder(), [], 0
        for c in cuts + [len(stream)]:
            out.extend(decoder.feed(stream[prev:c]))
            prev = c
        assert out == envs and decoder.pending == 0
