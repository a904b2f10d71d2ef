"""Workload generation and the ingest/query benchmark drivers.

The workload mimics per-node, per-minute monitoring samples (one document
per node per minute, ~75 metrics each) and synthetic user jobs whose node
set and time window define a conditional find with an exactly known result
size: ``len(node_ids) * duration_minutes``.
"""

from __future__ import annotations

import csv
import logging
import queue
import random
import threading
import time
import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .client import RouterClient
from .errors import (
    ClusterUnavailableError,
    FormatError,
    InvalidArgumentError,
    NodeDownError,
    PartialResultsError,
    ShardBatchError,
)
from .model import JobRecord, MetricDocument, make_doc_id
from .orchestrator import BaseConfig, launch, shutdown, synthetic_assignment

logger = logging.getLogger(__name__)

COLLECTION = "metrics"
# 2018-01-01T00:00:00Z, the start of the query window
WINDOW_START = 1514764800
MINUTES_PER_DAY = 1440
DAYS_SCHEDULE = {32: 3, 64: 7, 128: 14, 256: 14}
REPORT_HEADER = [
    "config",
    "shards",
    "routers",
    "streams",
    "total_docs",
    "ingest_seconds",
    "docs_per_second",
    "query_p50_s",
    "query_p95_s",
    "errors",
]


def days_for_nodes(n: int, override: int | None = None) -> int:
    if override is not None:
        if override < 1:
            raise InvalidArgumentError("days override must be >= 1")
        return override
    try:
        return DAYS_SCHEDULE[n]
    except KeyError:
        raise InvalidArgumentError(
            f"no data-volume schedule for {n} nodes (known: {sorted(DAYS_SCHEDULE)}); pass an override"
        ) from None


def node_names(n: int, prefix: str = "nid") -> list[str]:
    return [f"{prefix}{i:05d}" for i in range(n)]


def metric_names(n_metrics: int = 75) -> list[str]:
    return [f"metric_{i:02d}" for i in range(n_metrics)]


def generate_metrics(node_ids, start: int, days: int, n_metrics: int = 75, seed: int = 0):
    """Yield one document per (minute, node), minute-major.

    Values are seeded noise rounded to 3 decimals; doc_ids pack the seed as
    client id and the emission index as counter, so a stream is reproducible
    byte for byte.
    """
    if days < 1:
        raise InvalidArgumentError("days must be >= 1")
    if start % 60:
        raise InvalidArgumentError("start must be minute-aligned")
    if n_metrics < 1:
        raise InvalidArgumentError("n_metrics must be >= 1")
    node_ids = list(node_ids)
    names = metric_names(n_metrics)
    rng = np.random.default_rng(seed)
    client_id = seed % 2**32
    counter = 0
    for minute in range(days * MINUTES_PER_DAY):
        ts = start + 60 * minute
        values = np.round(rng.random((len(node_ids), n_metrics)) * 100.0, 3).tolist()
        for node, row in zip(node_ids, values):
            yield MetricDocument(make_doc_id(client_id, counter), node, ts, dict(zip(names, row)))
            counter += 1


class MetricsCsv:
    """Iterable of documents read from ``timestamp,node_id,<metric...>`` CSV.

    Blank metric cells are omitted from the document. Rows that cannot be
    parsed are skipped and counted in :attr:`skipped`.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.skipped = 0
        with open(self.path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), None)
        if not header or "timestamp" not in header or "node_id" not in header:
            raise FormatError(f"{self.path}: header must name timestamp and node_id columns")
        self.header = header

    def __iter__(self):
        client_id = zlib.crc32(self.path.name.encode())
        ts_col = self.header.index("timestamp")
        node_col = self.header.index("node_id")
        metric_cols = [(i, h) for i, h in enumerate(self.header) if i not in (ts_col, node_col)]
        with open(self.path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for rowno, row in enumerate(reader):
                if not row:
                    continue
                try:
                    if len(row) != len(self.header):
                        raise ValueError("wrong column count")
                    node = row[node_col].strip()
                    if not node:
                        raise ValueError("blank node_id")
                    ts = int(float(row[ts_col]))
                    metrics = {h: float(row[i]) for i, h in metric_cols if row[i].strip() != ""}
                    if not metrics:
                        raise ValueError("no metric values")
                except ValueError as exc:
                    self.skipped += 1
                    logger.debug("%s row %d skipped: %s", self.path, rowno + 2, exc)
                    continue
                yield MetricDocument(make_doc_id(client_id, rowno), node, ts, metrics)


def load_metrics_csv(path) -> MetricsCsv:
    return MetricsCsv(path)


def write_metrics_csv(docs, path, n_metrics: int = 75) -> int:
    names = metric_names(n_metrics)
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "node_id", *names])
        for d in docs:
            w.writerow([d.timestamp, d.node_id, *(repr(d.metrics[n]) if n in d.metrics else "" for n in names)])
            count += 1
    return count


def generate_jobs(n_jobs: int, all_nodes, window_start: int, window_days: int, seed: int = 0) -> list[JobRecord]:
    """Synthetic jobs fully inside ``[window_start, window_start + window_days)``.

    Node subsets are drawn without replacement from ``all_nodes`` so every
    job is covered by ingested data.
    """
    if window_days < 1 or not all_nodes:
        raise InvalidArgumentError("need a non-empty node list and window_days >= 1")
    rng = random.Random(seed)
    nodes = list(all_nodes)
    window_minutes = window_days * MINUTES_PER_DAY
    jobs = []
    for j in range(n_jobs):
        size = rng.randint(1, min(64, len(nodes)))
        members = rng.sample(nodes, size)
        start_minute = rng.randrange(window_minutes)
        duration = min(rng.randint(10, 2880), window_minutes - start_minute)
        jobs.append(JobRecord(f"job-{seed}-{j:05d}", frozenset(members), window_start + 60 * start_minute, duration))
    return jobs


@dataclass
class IngestPlan:
    node_count: int
    days: int
    client_hosts: list
    routers: list
    pe_per_node: int = 4
    batch_size: int = 1000

    @property
    def streams(self) -> int:
        return len(self.client_hosts) * self.pe_per_node

    def router_for(self, stream: int) -> str:
        return self.routers[stream % len(self.routers)]


@dataclass
class QueryRow:
    job_id: str
    expected_docs: int
    returned_docs: int
    seconds: float
    flag: str = "ok"


@dataclass
class BenchReport:
    config_label: str
    total_docs: int = 0
    wall_seconds: float = 0.0
    queries: list = field(default_factory=list)
    errors: Counter = field(default_factory=Counter)
    stream_inserted: list = field(default_factory=list)
    aborted: bool = False

    @property
    def docs_per_second(self) -> float:
        return self.total_docs / self.wall_seconds if self.wall_seconds > 0 else 0.0

    def query_seconds(self):
        return [q.seconds for q in self.queries]

    def percentile(self, p):
        secs = self.query_seconds()
        return float(np.percentile(secs, p)) if secs else 0.0


def _batches(source, batch_size):
    batch = []
    for doc in source:
        batch.append(doc.to_wire() if isinstance(doc, MetricDocument) else doc)
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def run_ingest(plan: IngestPlan, source, collection: str = COLLECTION, label: str = "ingest") -> BenchReport:
    """Drive ``plan.streams`` concurrent unordered inserts through the routers.

    Batch ``k`` of the source goes to stream ``k % streams``; stream ``s``
    talks to router ``s % len(routers)``. Batches are prepared before the
    clock starts.
    """
    if plan.batch_size <= 0:
        raise InvalidArgumentError("batch_size must be positive")
    if plan.streams < 1 or not plan.routers:
        raise InvalidArgumentError("plan needs at least one stream and one router")
    per_stream = [[] for _ in range(plan.streams)]
    for k, batch in enumerate(_batches(source, plan.batch_size)):
        per_stream[k % plan.streams].append(batch)

    report = BenchReport(label, stream_inserted=[0] * plan.streams)
    lock = threading.Lock()
    abort = threading.Event()

    def stream(s):
        with RouterClient(plan.router_for(s)) as client:
            for batch in per_stream[s]:
                if abort.is_set():
                    return
                try:
                    res = client.insert_many(collection, batch)
                except (ClusterUnavailableError, NodeDownError) as exc:
                    logger.error("stream %d aborting: %s", s, exc)
                    with lock:
                        report.errors[exc.code] += len(batch)
                        report.aborted = True
                    abort.set()
                    return
                except ShardBatchError as exc:
                    with lock:
                        report.errors[exc.code] += len(batch)
                    continue
                with lock:
                    report.stream_inserted[s] += res.inserted_count
                    for e in res.errors:
                        report.errors[e.code] += 1

    threads = [threading.Thread(target=stream, args=(s,), name=f"ingest-{s}") for s in range(plan.streams)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    report.wall_seconds = time.perf_counter() - t0
    report.total_docs = sum(report.stream_inserted)
    return report


def run_query_bench(jobs, routers, concurrency: int, collection: str = COLLECTION, label: str = "query") -> BenchReport:
    """Issue one conditional find per job with ``concurrency`` workers.

    Each row records the expected size (nodes x minutes) against what came
    back; shortfalls are flagged ``coverage_gap`` and failed finds
    ``partial_results``.
    """
    if concurrency < 1 or not routers:
        raise InvalidArgumentError("concurrency must be >= 1 and routers non-empty")
    work: queue.Queue = queue.Queue()
    for pos, job in enumerate(jobs):
        work.put((pos, job))
    rows: list = [None] * len(jobs)

    def worker(w):
        with RouterClient(routers[w % len(routers)]) as client:
            while True:
                try:
                    pos, job = work.get_nowait()
                except queue.Empty:
                    return
                t0 = time.perf_counter()
                flag = "ok"
                try:
                    returned = client.count(collection, job.to_filter())
                except PartialResultsError:
                    returned, flag = 0, "partial_results"
                except ShardBatchError as exc:
                    returned, flag = 0, exc.code
                secs = time.perf_counter() - t0
                if flag == "ok" and returned < job.expected_docs:
                    flag = "coverage_gap"
                elif flag == "ok" and returned > job.expected_docs:
                    flag = "excess"
                rows[pos] = QueryRow(job.job_id, job.expected_docs, returned, secs, flag)

    threads = [threading.Thread(target=worker, args=(w,), name=f"query-{w}") for w in range(concurrency)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    report = BenchReport(label, wall_seconds=time.perf_counter() - t0, queries=rows)
    report.total_docs = sum(r.returned_docs for r in rows)
    report.errors = Counter(r.flag for r in rows if r.flag != "ok")
    return report


@dataclass
class SweepConfig:
    shards: int
    routers: int
    streams: int

    @property
    def label(self):
        return f"s{self.shards}-r{self.routers}-c{self.streams}"


def scaling_sweep(
    configs,
    report_path,
    base_config: BaseConfig | None = None,
    nodes_per_shard: int = 4,
    days: int = 1,
    n_jobs: int = 20,
    query_concurrency: int = 4,
    batch_size: int = 1000,
    n_metrics: int = 75,
    seed: int = 0,
) -> Path:
    """Launch, load, query and tear down one cluster per config, writing one CSV row each.

    Document volume grows with the shard count (``nodes_per_shard * shards``
    nodes for ``days`` days). A config that fails to launch is written as a
    ``failed`` row and the sweep continues.
    """
    base = base_config or BaseConfig()
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        fh.flush()
        for raw in configs:
            cfg = raw if isinstance(raw, SweepConfig) else SweepConfig(*raw)
            row = _sweep_one(cfg, base, nodes_per_shard, days, n_jobs, query_concurrency, batch_size, n_metrics, seed)
            writer.writerow(row)
            fh.flush()
    return report_path


def _sweep_one(cfg, base, nodes_per_shard, days, n_jobs, query_concurrency, batch_size, n_metrics, seed):
    pe = 4 if cfg.streams % 4 == 0 else 1
    clients = [f"client{i}" for i in range(cfg.streams // pe)]
    run_cfg = replace(base, data_root=str(Path(base.data_root) / cfg.label))
    try:
        handle = launch(synthetic_assignment(cfg.shards, cfg.routers, len(clients)), run_cfg)
    except ShardBatchError as exc:
        logger.error("config %s failed to launch: %s", cfg.label, exc)
        return [cfg.label, cfg.shards, cfg.routers, cfg.streams, 0, "", "", "", "", f"failed: {exc.code}"]
    try:
        nodes = node_names(nodes_per_shard * cfg.shards)
        plan = IngestPlan(len(nodes), days, clients, handle.router_endpoints, pe_per_node=pe, batch_size=batch_size)
        source = generate_metrics(nodes, WINDOW_START, days, n_metrics, seed)
        ingest = run_ingest(plan, source, label=cfg.label)
        jobs = generate_jobs(n_jobs, nodes, WINDOW_START, days, seed)
        query = run_query_bench(jobs, handle.router_endpoints, query_concurrency, label=cfg.label)
    finally:
        shutdown(handle, grace_s=base.shutdown_grace_s)
    errors = sum(ingest.errors.values()) + sum(query.errors.values())
    return [
        cfg.label,
        cfg.shards,
        cfg.routers,
        cfg.streams,
        ingest.total_docs,
        repr(ingest.wall_seconds),
        repr(ingest.total_docs / ingest.wall_seconds),
        repr(query.percentile(50)),
        repr(query.percentile(95)),
        errors,
    ]
