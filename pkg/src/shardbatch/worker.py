"""Process entry point for one cluster worker (config, shard or router).

Launched by the orchestrator as ``python -m shardbatch.worker <role> ...``.
The cluster token is read from ``SHARDBATCH_CLUSTER_TOKEN`` so it never
appears in the process table.
"""

import argparse
import logging
import os
import sys
import time

from .errors import ShardBatchError

TOKEN_ENV = "SHARDBATCH_CLUSTER_TOKEN"

logger = logging.getLogger("shardbatch.worker")


def build_parser():
    p = argparse.ArgumentParser(prog="shardbatch.worker")
    p.add_argument("role", choices=["config", "shard", "router"])
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--data-dir")
    p.add_argument("--shard-id")
    p.add_argument("--config-endpoints", default="")
    p.add_argument("--mirror-endpoint")
    p.add_argument("--is-mirror", action="store_true")
    p.add_argument("--split-threshold", type=int, default=4096)
    p.add_argument("--segment-max-bytes", type=int, default=64 * 1024 * 1024)
    p.add_argument("--no-fsync", action="store_true")
    p.add_argument("--collection", default="metrics")
    p.add_argument("--hang-on-shutdown", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO,
        format=f"%(asctime)s {args.role}:{args.port} %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    token = os.environ.get(TOKEN_ENV, "")
    config_endpoints = [e for e in args.config_endpoints.split(",") if e]
    fsync = not args.no_fsync
    try:
        if args.role == "config":
            from .configsrv import ConfigServer

            server = ConfigServer(
                args.data_dir,
                args.host,
                args.port,
                token,
                mirror_endpoint=args.mirror_endpoint,
                is_mirror=args.is_mirror,
                fsync=fsync,
            )
        elif args.role == "shard":
            from .shard import ShardServer

            server = ShardServer(
                args.shard_id,
                args.data_dir,
                args.host,
                args.port,
                token,
                config_endpoint=config_endpoints[0],
                split_threshold=args.split_threshold,
                segment_max_bytes=args.segment_max_bytes,
                fsync=fsync,
                hang_on_shutdown=args.hang_on_shutdown,
            )
        else:
            from .router import RouterServer

            server = RouterServer(config_endpoints, args.host, args.port, token)
    except (OSError, ShardBatchError) as exc:
        logger.error("failed to start %s on port %d: %s", args.role, args.port, exc)
        return 1

    server.start()
    logger.info("%s listening on %s", args.role, server.endpoint)
    try:
        if args.role == "shard":
            _with_retry(server.register, "register with config server")
        elif args.role == "router":
            try:
                server.router.refresh_map(args.collection)
            except ShardBatchError as exc:
                logger.info("no shard map for %s yet: %s", args.collection, exc)
        server.stopped.wait()
    except KeyboardInterrupt:
        server.stop()
    except ShardBatchError as exc:
        logger.error("%s failed: %s", args.role, exc)
        server.stop()
        return 2
    logger.info("%s stopped", args.role)
    return 0


def _with_retry(fn, what, attempts=50, delay=0.1):
    for i in range(attempts):
        try:
            return fn()
        except ShardBatchError as exc:
            if i == attempts - 1 or not exc.retryable and exc.code != "node_down":
                raise
            logger.info("retrying %s: %s", what, exc)
            time.sleep(delay)


if __name__ == "__main__":
    sys.exit(main())
