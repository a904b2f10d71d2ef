import csv
import hashlib
import socket
from collections import Counter

import pytest

from shardbatch import bench
from shardbatch.errors import FormatError, InvalidArgumentError
from shardbatch.model import JobRecord

from test_orchestrator import config


def stream_digest(docs):
    h = hashlib.sha256()
    for d in docs:
        h.update(d.doc_id + d.node_id.encode() + d.timestamp.to_bytes(8, "big"))
        h.update(repr(sorted(d.metrics.items())).encode())
    return h.hexdigest()


class TestSchedule:
    @pytest.mark.parametrize("n,days", [(32, 3), (64, 7), (128, 14), (256, 14)])
    def test_table(self, n, days):
        assert bench.days_for_nodes(n) == days

    def test_unknown_needs_override(self):
        with pytest.raises(InvalidArgumentError):
            bench.days_for_nodes(8)
        assert bench.days_for_nodes(8, override=2) == 2
        with pytest.raises(InvalidArgumentError):
            bench.days_for_nodes(8, override=0)


class TestGenerateMetrics:
    def test_count(self):
        docs = list(bench.generate_metrics(bench.node_names(4), bench.WINDOW_START, 3, n_metrics=3))
        assert len(docs) == 4 * 3 * 1440 == 17280
        assert len({d.doc_id for d in docs}) == len(docs)
        assert Counter(d.node_id for d in docs) == {n: 3 * 1440 for n in bench.node_names(4)}
        assert all(d.timestamp % 60 == 0 for d in docs)
        assert min(d.timestamp for d in docs) == bench.WINDOW_START
        assert max(d.timestamp for d in docs) == bench.WINDOW_START + 3 * 86400 - 60

    def test_metric_names(self):
        d = next(bench.generate_metrics(["n"], bench.WINDOW_START, 1))
        assert sorted(d.metrics) == [f"metric_{i:02d}" for i in range(75)]

    def test_deterministic(self):
        a = bench.generate_metrics(["nid00000"], bench.WINDOW_START, 1, seed=4)
        b = bench.generate_metrics(["nid00000"], bench.WINDOW_START, 1, seed=4)
        c = bench.generate_metrics(["nid00000"], bench.WINDOW_START, 1, seed=5)
        assert stream_digest(a) == stream_digest(b) != stream_digest(c)

    def test_zero_days(self):
        with pytest.raises(InvalidArgumentError):
            list(bench.generate_metrics(["n"], bench.WINDOW_START, 0))


class TestCsv:
    HEADER = "timestamp,node_id," + ",".join(f"metric_{i:02d}" for i in range(8)) + "\n"

    def test_three_rows(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(self.HEADER + "".join(f"{60 * i},nid1," + ",".join(["1.5"] * 8) + "\n" for i in range(3)))
        docs = list(bench.load_metrics_csv(path))
        assert len(docs) == 3 and docs[2].timestamp == 120 and docs[0].metrics["metric_07"] == 1.5

    def test_blank_metric_omitted(self, tmp_path):
        path = tmp_path / "m.csv"
        cells = ["1"] * 8
        cells[5] = ""
        path.write_text(self.HEADER + "0,nid1," + ",".join(cells) + "\n")
        (doc,) = bench.load_metrics_csv(path)
        assert "metric_05" not in doc.metrics and len(doc.metrics) == 7

    def test_missing_node_column(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("timestamp,metric_00\n0,1\n")
        with pytest.raises(FormatError):
            bench.load_metrics_csv(path)

    def test_bad_rows_skipped_and_counted(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(self.HEADER + "abc,nid1,1,1,1,1,1,1,1,1\n0,nid1,x,1,1,1,1,1,1,1\n60,nid1,1,1,1,1,1,1,1,1\n")
        src = bench.load_metrics_csv(path)
        assert len(list(src)) == 1
        assert src.skipped == 2

    def test_round_trip(self, tmp_path):
        docs = list(bench.generate_metrics(bench.node_names(2), bench.WINDOW_START, 1, n_metrics=5))
        assert bench.write_metrics_csv(docs, tmp_path / "m.csv", n_metrics=5) == len(docs)
        back = list(bench.load_metrics_csv(tmp_path / "m.csv"))
        assert [(d.node_id, d.timestamp, d.metrics) for d in back] == [(d.node_id, d.timestamp, dict(d.metrics)) for d in docs]


class TestJobs:
    def test_deterministic(self):
        nodes = bench.node_names(8)
        assert bench.generate_jobs(30, nodes, bench.WINDOW_START, 3, seed=1) == bench.generate_jobs(
            30, nodes, bench.WINDOW_START, 3, seed=1
        )

    def test_window_and_shape(self):
        nodes = bench.node_names(100)
        jobs = bench.generate_jobs(100, nodes, bench.WINDOW_START, 3, seed=2)
        end = bench.WINDOW_START + 3 * 86400
        assert len(jobs) == 100 and len({j.job_id for j in jobs}) == 100
        for j in jobs:
            assert isinstance(j, JobRecord)
            assert bench.WINDOW_START <= j.start and j.end <= end
            assert j.start % 60 == 0
            assert 1 <= len(j.node_ids) <= 64
            assert j.node_ids <= set(nodes)
            assert 1 <= j.duration_minutes <= 2880
        # clipping aside, durations come from [10, 2880]
        assert all(j.duration_minutes >= 10 for j in jobs if j.end < end)
        assert max(len(j.node_ids) for j in jobs) > 32

    def test_small_universe(self):
        jobs = bench.generate_jobs(50, ["a", "b"], bench.WINDOW_START, 1, seed=3)
        assert all(1 <= len(j.node_ids) <= 2 for j in jobs)


@pytest.fixture
def cluster(make_cluster):
    return make_cluster(n_shards=2, split_threshold=3000)


class TestIngestAndQuery:
    def test_ingest_conservation_and_rerun(self, cluster):
        nodes = bench.node_names(4)
        plan = bench.IngestPlan(4, 3, ["client0"], [cluster.router_endpoint], pe_per_node=4, batch_size=1000)
        assert plan.streams == 4
        source = list(bench.generate_metrics(nodes, bench.WINDOW_START, 3, n_metrics=2))
        report = bench.run_ingest(plan, source)
        assert report.total_docs == 17280 and not report.errors
        assert sum(report.stream_inserted) == report.total_docs == sum(cluster.live_counts().values())
        assert report.docs_per_second == report.total_docs / report.wall_seconds
        again = bench.run_ingest(plan, source)
        assert again.total_docs == 0
        assert again.errors == Counter({"duplicate_key": 17280})

    def test_batch_size_zero(self, cluster):
        plan = bench.IngestPlan(1, 1, ["c"], [cluster.router_endpoint], batch_size=0)
        with pytest.raises(InvalidArgumentError):
            bench.run_ingest(plan, [])

    def test_round_robin_routers(self):
        plan = bench.IngestPlan(1, 1, ["c0", "c1"], ["r0", "r1", "r2"], pe_per_node=4)
        assert [plan.router_for(s) for s in range(plan.streams)] == ["r0", "r1", "r2"] * 2 + ["r0", "r1"]

    def test_query_bench(self, cluster):
        nodes = bench.node_names(10)
        plan = bench.IngestPlan(10, 1, ["c"], [cluster.router_endpoint], pe_per_node=2)
        bench.run_ingest(plan, bench.generate_metrics(nodes, bench.WINDOW_START, 1, n_metrics=2))
        exact = JobRecord("ten-by-sixty", set(nodes), bench.WINDOW_START + 3600, 60)
        early = JobRecord("early", {"nid00001"}, bench.WINDOW_START - 86400, 30)
        jobs = [exact, early, *bench.generate_jobs(15, nodes, bench.WINDOW_START, 1, seed=9)]
        serial = bench.run_query_bench(jobs, [cluster.router_endpoint], concurrency=1)
        rows = {r.job_id: r for r in serial.queries}
        assert (rows["ten-by-sixty"].expected_docs, rows["ten-by-sixty"].returned_docs) == (600, 600)
        assert rows["early"].expected_docs == 30 and rows["early"].returned_docs == 0
        assert rows["early"].flag == "coverage_gap"
        assert all(r.flag == "ok" and r.returned_docs == r.expected_docs for r in serial.queries[2:])
        parallel = bench.run_query_bench(jobs, [cluster.router_endpoint], concurrency=16)
        assert [r.returned_docs for r in parallel.queries] == [r.returned_docs for r in serial.queries]
        assert serial.errors == Counter({"coverage_gap": 1})

    def test_partial_results_flagged(self, cluster):
        plan = bench.IngestPlan(2, 1, ["c"], [cluster.router_endpoint], pe_per_node=1)
        bench.run_ingest(plan, bench.generate_metrics(bench.node_names(2), bench.WINDOW_START, 1, n_metrics=1))
        for s in cluster.shards:
            s.stop()
        jobs = [JobRecord("j", {"nid00000"}, bench.WINDOW_START, 10)]
        report = bench.run_query_bench(jobs, [cluster.router_endpoint], concurrency=2)
        assert report.queries[0].flag == "partial_results"


class TestSweep:
    def test_empty(self, tmp_path):
        path = bench.scaling_sweep([], tmp_path / "sweep.csv")
        assert path.read_text().splitlines() == [",".join(bench.REPORT_HEADER)]

    def test_failed_config_does_not_stop_sweep(self, tmp_path):
        cfg = config(tmp_path, n_hosts=7)
        blocker = socket.socket()
        blocker.bind(("127.0.0.1", cfg.base_port + 10 * 5))
        blocker.listen()
        try:
            path = bench.scaling_sweep(
                [(1, 1, 4), (2, 2, 8)], tmp_path / "sweep.csv", cfg, nodes_per_shard=2, days=1, n_jobs=3, n_metrics=2
            )
        finally:
            blocker.close()
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert [r["config"] for r in rows] == ["s1-r1-c4", "s2-r2-c8"]
        assert rows[0]["errors"] == "0" and int(rows[0]["total_docs"]) == 2 * 1440
        assert float(rows[0]["docs_per_second"]) == int(rows[0]["total_docs"]) / float(rows[0]["ingest_seconds"])
        assert rows[1]["errors"].startswith("failed")
