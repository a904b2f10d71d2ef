"""Command-line entry point for batch-job run-scripts.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

from . import bench, orchestrator
from .client import ROUTERS_ENV, read_endpoints_file, routers_from_env
from .errors import ShardBatchError
from .model import JobRecord

logger = logging.getLogger("shardbatch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


def _config_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data-root")
    p.add_argument("--base-port", type=int)
    p.add_argument("--split-threshold", type=int)
    p.add_argument("--startup-timeout-s", type=float)
    p.add_argument("--cluster-token")


def _routers_flag(p):
    p.add_argument("--routers-file", help=f"published router endpoints (default: ${ROUTERS_ENV})")


def _workload_flags(p, nodes=8, days=3):
    p.add_argument("--nodes", type=int, default=nodes, help="number of synthetic compute nodes")
    p.add_argument("--days", type=int, default=days)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="shardbatch", description="Sharded metric store as a transient batch job.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("launch", help="assign roles from a nodefile and start the cluster")
    p.add_argument("--nodefile", required=True)
    p.add_argument("--endpoints-out")
    p.add_argument("--permissive", action="store_true", help="allow host counts that are not a multiple of 4")
    _config_flags(p)

    for name, text in (("shutdown", "stop a launched cluster"), ("status", "ping every worker")):
        p = sub.add_parser(name, help=text)
        _config_flags(p)

    p = sub.add_parser("ingest", help="load metric documents through the routers")
    _routers_flag(p)
    _workload_flags(p)
    p.add_argument("--csv", help="ingest this CSV file instead of generated data")
    p.add_argument("--concurrency", type=int, default=4, help="concurrent insert streams")
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--report-out")

    p = sub.add_parser("query", help="run job-derived conditional finds")
    _routers_flag(p)
    _workload_flags(p)
    p.add_argument("--jobs", type=int, default=50)
    p.add_argument("--jobs-file", help="JSON-lines jobs written by gen-jobs")
    p.add_argument("--concurrency", type=int, default=16)
    p.add_argument("--report-out")

    p = sub.add_parser("sweep", help="launch/ingest/query/teardown over several shard counts")
    p.add_argument("--configs", default="1,2,4", help="comma-separated shard counts")
    _config_flags(p)
    p.add_argument("--nodes", type=int, default=4, help="synthetic nodes per shard")
    p.add_argument("--days", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=20)
    p.add_argument("--concurrency", type=int, default=4, help="concurrent queries")
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--report-out", default="sweep.csv")

    p = sub.add_parser("gen-data", help="write a synthetic metrics CSV")
    _workload_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-jobs", help="write synthetic jobs as JSON lines")
    _workload_flags(p)
    p.add_argument("--jobs", type=int, default=50)
    p.add_argument("--out", required=True)
    return parser


def _base_config(args):
    return orchestrator.load_config(
        args.config,
        data_root=args.data_root,
        base_port=args.base_port,
        split_threshold=args.split_threshold,
        startup_timeout_s=args.startup_timeout_s,
        cluster_token=args.cluster_token,
    )


def _routers(args, parser):
    if args.routers_file:
        routers = read_endpoints_file(args.routers_file)
    else:
        routers = routers_from_env()
        if not routers:
            parser.error(f"--routers-file is required when ${ROUTERS_ENV} is unset")
    if not routers:
        raise ShardBatchError(f"no router endpoints in {args.routers_file}")
    return routers


def cmd_launch(args, parser):
    cfg = _base_config(args)
    handle = orchestrator.launch_from_nodefile(
        args.nodefile, cfg, endpoints_out=args.endpoints_out, strict=not args.permissive
    )
    counts = handle.topology.counts()
    print(f"# cluster ready: config={counts[0]} shards={counts[1]} routers={counts[2]} clients={counts[3]}")
    print(f"# data root: {handle.data_root}")
    print(f"export {ROUTERS_ENV}={','.join(handle.router_endpoints)}")
    return 0


def cmd_shutdown(args, parser):
    cfg = _base_config(args)
    report = orchestrator.shutdown(orchestrator.ClusterHandle.load(cfg.data_root), grace_s=cfg.shutdown_grace_s)
    print(json.dumps(report, indent=2))
    return 0


def cmd_status(args, parser):
    cfg = _base_config(args)
    handle = orchestrator.ClusterHandle.load(cfg.data_root)
    result = orchestrator.status(handle)
    print(json.dumps({"state": handle.state, "workers": result}, indent=2))
    return 0 if all(v == "up" for v in result.values()) else 2


def cmd_ingest(args, parser):
    routers = _routers(args, parser)
    if args.csv:
        source = bench.load_metrics_csv(args.csv)
    else:
        source = bench.generate_metrics(
            bench.node_names(args.nodes), bench.WINDOW_START, args.days, seed=args.seed
        )
    plan = bench.IngestPlan(
        args.nodes, args.days, [f"stream{i}" for i in range(args.concurrency)], routers,
        pe_per_node=1, batch_size=args.batch_size,
    )
    report = bench.run_ingest(plan, source)
    summary = {
        "inserted": report.total_docs,
        "wall_seconds": report.wall_seconds,
        "docs_per_second": report.docs_per_second,
        "errors": dict(report.errors),
        "streams": plan.streams,
    }
    if args.csv:
        summary["skipped_rows"] = source.skipped
    print(json.dumps(summary, indent=2))
    if args.report_out:
        with open(args.report_out, "w") as fh:
            json.dump(summary, fh, indent=2)
    return 2 if report.aborted else 0


def cmd_query(args, parser):
    routers = _routers(args, parser)
    if args.jobs_file:
        with open(args.jobs_file) as fh:
            jobs = [JobRecord.from_wire(json.loads(line)) for line in fh if line.strip()]
    else:
        jobs = bench.generate_jobs(
            args.jobs, bench.node_names(args.nodes), bench.WINDOW_START, args.days, seed=args.seed
        )
    report = bench.run_query_bench(jobs, routers, args.concurrency)
    if args.report_out:
        with open(args.report_out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["job_id", "expected_docs", "returned_docs", "seconds", "flag"])
            for r in report.queries:
                w.writerow([r.job_id, r.expected_docs, r.returned_docs, repr(r.seconds), r.flag])
    print(json.dumps({
        "queries": len(report.queries),
        "returned_docs": report.total_docs,
        "exact": sum(r.flag == "ok" for r in report.queries),
        "flagged": dict(report.errors),
        "query_p50_s": report.percentile(50),
        "query_p95_s": report.percentile(95),
    }, indent=2))
    # count mismatches are findings; failed finds are a runtime failure
    failed = [r.job_id for r in report.queries if r.flag not in ("ok", "coverage_gap", "excess")]
    if failed:
        print(f"shardbatch: {len(failed)} queries failed", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(args, parser):
    try:
        shard_counts = [int(x) for x in args.configs.split(",") if x.strip()]
    except ValueError:
        parser.error(f"--configs must be comma-separated integers, got {args.configs!r}")
    if any(s < 1 for s in shard_counts):
        parser.error("shard counts must be >= 1")
    cfg = _base_config(args)
    configs = [bench.SweepConfig(s, s, 4 * s) for s in shard_counts]
    path = bench.scaling_sweep(
        configs,
        args.report_out,
        cfg,
        nodes_per_shard=args.nodes,
        days=args.days,
        n_jobs=args.jobs,
        query_concurrency=args.concurrency,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    print(path.read_text(), end="")
    return 0


def cmd_gen_data(args, parser):
    docs = bench.generate_metrics(bench.node_names(args.nodes), bench.WINDOW_START, args.days, seed=args.seed)
    n = bench.write_metrics_csv(docs, args.out)
    print(f"wrote {n} documents to {args.out}")
    return 0


def cmd_gen_jobs(args, parser):
    jobs = bench.generate_jobs(args.jobs, bench.node_names(args.nodes), bench.WINDOW_START, args.days, seed=args.seed)
    with open(args.out, "w") as fh:
        for job in jobs:
            fh.write(json.dumps(job.to_wire()) + "\n")
    print(f"wrote {len(jobs)} jobs to {args.out}")
    return 0


COMMANDS = {
    "launch": cmd_launch,
    "shutdown": cmd_shutdown,
    "status": cmd_status,
    "ingest": cmd_ingest,
    "query": cmd_query,
    "sweep": cmd_sweep,
    "gen-data": cmd_gen_data,
    "gen-jobs": cmd_gen_jobs,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a subcommand is required")
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        return COMMANDS[args.command](args, parser)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ShardBatchError, OSError, ValueError) as exc:
        print(f"shardbatch: {type(exc).__name__}: {exc}", file=sys.stderr)
        log_excerpt = getattr(exc, "log_excerpt", "")
        if log_excerpt:
            print(log_excerpt, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
