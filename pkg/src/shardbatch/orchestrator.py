"""Run-script engine: nodefile parsing, role assignment, launch and teardown.

At desk scale every logical host maps to loopback; logical host ``i`` (in
role order) listens on ``base_port + 10 * i``.
"""

from __future__ import annotations

import json
import logging
import os
import secrets
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import psutil

from .client import ROUTERS_ENV
from .errors import (
    ConflictError,
    InvalidCountError,
    InvalidStateError,
    LaunchFailedError,
    LockError,
    ShardBatchError,
    TooFewNodesError,
)
from .model import RoleAssignment
from .protocol import Connection
from .worker import TOKEN_ENV

logger = logging.getLogger(__name__)

COLLECTION = "metrics"
INDEX_FIELDS = ("timestamp", "node_id")
PORT_STRIDE = 10


@dataclass
class BaseConfig:
    base_port: int = 4100
    data_root: str = "shardbatch-data"
    split_threshold: int = 4096
    startup_timeout_s: float = 30.0
    cluster_token: str = ""
    bind_host: str = "127.0.0.1"
    shutdown_grace_s: float = 10.0
    fsync: bool = True
    segment_max_bytes: int = 64 * 1024 * 1024
    hang_on_shutdown: tuple = ()  # test hook: worker names that ignore shutdown

    _INT_KEYS = ("base_port", "split_threshold", "segment_max_bytes")
    _FLOAT_KEYS = ("startup_timeout_s", "shutdown_grace_s")


def load_config(path=None, **overrides) -> BaseConfig:
    """Read a flat ``key=value`` file; keyword overrides win over file values."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ValueError(f"{path}:{lineno}: expected key=value")
                values[key.strip()] = value.strip()
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = BaseConfig()
    for key, value in values.items():
        if not hasattr(cfg, key) or key.startswith("_"):
            raise ValueError(f"unknown config key {key!r}")
        if key in BaseConfig._INT_KEYS:
            value = int(value)
        elif key in BaseConfig._FLOAT_KEYS:
            value = float(value)
        elif key == "fsync" and isinstance(value, str):
            value = value.lower() in ("1", "true", "yes")
        setattr(cfg, key, value)
    return cfg


def read_nodefile(path) -> list[str]:
    """Unique hostnames in first-seen order; blank lines ignored."""
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            host = line.strip()
            if host:
                seen.setdefault(host, None)
    return list(seen)


def assign_roles(nodes, strict: bool = True) -> RoleAssignment:
    """Split hosts into 2 config, equal shard/router halves of the rest, and clients.

    Half the hosts run clients; of the other half, 2 are config servers and
    the remainder is shared between shards and routers.
    """
    nodes = list(nodes)
    n = len(nodes)
    if n < 8:
        raise TooFewNodesError(f"need at least 8 hosts, got {n}")
    if strict and n % 4:
        raise InvalidCountError(f"host count {n} is not a multiple of 4")
    workers = n // 2 - 2
    shards = (workers + 1) // 2
    routers = workers // 2
    assignment = RoleAssignment(
        config_nodes=tuple(nodes[:2]),
        shard_nodes=tuple(nodes[2:2 + shards]),
        router_nodes=tuple(nodes[2 + shards:2 + shards + routers]),
        client_nodes=tuple(nodes[2 + shards + routers:]),
    )
    return assignment.validate(nodes)


def synthetic_assignment(shards: int, routers: int, clients: int = 1) -> RoleAssignment:
    """Assignment over made-up hostnames, for sweeps that pick counts directly."""
    names = [f"host{i:04d}" for i in range(2 + shards + routers + clients)]
    return RoleAssignment(
        tuple(names[:2]),
        tuple(names[2:2 + shards]),
        tuple(names[2 + shards:2 + shards + routers]),
        tuple(names[2 + shards + routers:]),
    ).validate(names)


@dataclass
class WorkerInfo:
    name: str
    role: str
    host: str
    endpoint: str
    data_dir: str = ""
    log_path: str = ""
    pid: int = 0
    exit_status: int | None = None
    forced: bool = False


@dataclass
class ClusterHandle:
    topology: RoleAssignment
    data_root: str
    cluster_token: str
    workers: list = field(default_factory=list)
    endpoints_file: str = ""
    state: str = "launching"
    _procs: dict = field(default_factory=dict, repr=False)

    @property
    def config_endpoints(self):
        return [w.endpoint for w in self.workers if w.role == "config"]

    @property
    def router_endpoints(self):
        return [w.endpoint for w in self.workers if w.role == "router"]

    def by_role(self, role):
        return [w for w in self.workers if w.role == role]

    def state_path(self):
        return Path(self.data_root) / "cluster.json"

    def save(self):
        state = {
            "topology": {k: list(v) for k, v in asdict(self.topology).items()},
            "data_root": self.data_root,
            "cluster_token": self.cluster_token,
            "workers": [asdict(w) for w in self.workers],
            "endpoints_file": self.endpoints_file,
            "state": self.state,
        }
        tmp = self.state_path().with_suffix(".tmp")
        tmp.write_text(json.dumps(state, indent=2))
        os.chmod(tmp, 0o600)
        os.replace(tmp, self.state_path())

    @classmethod
    def load(cls, data_root) -> "ClusterHandle":
        path = Path(data_root) / "cluster.json"
        if not path.exists():
            raise InvalidStateError(f"no cluster state in {data_root}")
        state = json.loads(path.read_text())
        topo = RoleAssignment(**{k: tuple(v) for k, v in state["topology"].items()})
        return cls(
            topology=topo,
            data_root=state["data_root"],
            cluster_token=state["cluster_token"],
            workers=[WorkerInfo(**w) for w in state["workers"]],
            endpoints_file=state.get("endpoints_file", ""),
            state=state["state"],
        )


# -- lockfile ---------------------------------------------------------------


def _lock_path(data_root):
    return Path(data_root) / "LOCK"


def _pid_alive(pid):
    if not pid:
        return False
    try:
        return psutil.Process(pid).status() != psutil.STATUS_ZOMBIE
    except psutil.NoSuchProcess:
        return False


def _acquire_lock(data_root):
    path = _lock_path(data_root)
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            try:
                held = json.loads(path.read_text() or "{}")
            except (OSError, ValueError):
                held = {}
            pids = [held.get("pid", 0), *held.get("workers", [])]
            if any(_pid_alive(p) for p in pids):
                raise LockError(f"{data_root} is in use by a live cluster (pids {pids})") from None
            logger.warning("removing stale lockfile %s", path)
            path.unlink(missing_ok=True)
            continue
        with os.fdopen(fd, "w") as fh:
            json.dump({"pid": os.getpid(), "workers": []}, fh)
        return
    raise LockError(f"could not acquire {path}")


def _update_lock(handle, launcher_alive=True):
    pids = [w.pid for w in handle.workers if w.pid]
    _lock_path(handle.data_root).write_text(
        json.dumps({"pid": os.getpid() if launcher_alive else 0, "workers": pids})
    )


def _release_lock(data_root):
    _lock_path(data_root).unlink(missing_ok=True)


# -- launch -----------------------------------------------------------------


def _ping(endpoint, token, timeout=2.0):
    with Connection(endpoint, token, connect_timeout=timeout) as conn:
        return conn.request("ping", timeout=timeout).payload


def _log_tail(path, lines=20):
    try:
        with open(path, encoding="utf-8", errors="replace") as fh:
            return "".join(fh.readlines()[-lines:])
    except OSError:
        return ""


def _spawn(handle, info: WorkerInfo, argv, cfg: BaseConfig):
    env = dict(os.environ)
    env[TOKEN_ENV] = handle.cluster_token
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    log = open(info.log_path, "ab")
    proc = subprocess.Popen(
        [sys.executable, "-m", "shardbatch.worker", *argv],
        stdin=subprocess.DEVNULL,
        stdout=log,
        stderr=subprocess.STDOUT,
        env=env,
        start_new_session=True,
    )
    log.close()
    info.pid = proc.pid
    handle._procs[info.name] = proc
    handle.workers.append(info)
    _update_lock(handle)
    return proc


def _wait_ready(handle, info: WorkerInfo, deadline):
    proc = handle._procs[info.name]
    while True:
        if proc.poll() is not None:
            raise LaunchFailedError(
                f"{info.name} exited with status {proc.returncode} during startup",
                role=info.name,
                log_excerpt=_log_tail(info.log_path),
            )
        try:
            _ping(info.endpoint, handle.cluster_token)
            return
        except ShardBatchError:
            pass
        if time.monotonic() > deadline:
            raise LaunchFailedError(
                f"{info.name} did not answer ping within the startup timeout",
                role=info.name,
                log_excerpt=_log_tail(info.log_path),
            )
        time.sleep(0.05)


def _wait_registered(handle, shard_ids, deadline):
    primary = handle.config_endpoints[0]
    while True:
        with Connection(primary, handle.cluster_token) as conn:
            registered = set(conn.request("hello").payload["shards"])
        missing = set(shard_ids) - registered
        if not missing:
            return
        for w in handle.by_role("shard"):
            if w.name in missing and handle._procs[w.name].poll() is not None:
                raise LaunchFailedError(
                    f"{w.name} exited before registering", role=w.name, log_excerpt=_log_tail(w.log_path)
                )
        if time.monotonic() > deadline:
            name = sorted(missing)[0]
            w = next(x for x in handle.workers if x.name == name)
            raise LaunchFailedError(
                f"{name} did not register within the startup timeout", role=name, log_excerpt=_log_tail(w.log_path)
            )
        time.sleep(0.05)


def launch(assignment: RoleAssignment, base_config: BaseConfig | None = None) -> ClusterHandle:
    """Start config primary, config mirror, shards and routers, in that order.

    Returns a handle in state ``ready`` once every worker answers ping, every
    shard is registered and the ``metrics`` collection exists.
    """
    cfg = base_config or BaseConfig()
    assignment.validate()
    root = Path(cfg.data_root).resolve()
    root.mkdir(parents=True, exist_ok=True)
    _acquire_lock(root)
    token = cfg.cluster_token or secrets.token_hex(16)
    handle = ClusterHandle(topology=assignment, data_root=str(root), cluster_token=token)
    (root / "logs").mkdir(exist_ok=True)
    hosts = assignment.all_nodes()

    def info(role, i, name, host, data_dir=""):
        port = cfg.base_port + PORT_STRIDE * hosts.index(host)
        return WorkerInfo(
            name=name,
            role=role,
            host=host,
            endpoint=f"{cfg.bind_host}:{port}",
            data_dir=data_dir,
            log_path=str(root / "logs" / f"{name}.log"),
        )

    common = ["--no-fsync"] if not cfg.fsync else []
    deadline = time.monotonic() + cfg.startup_timeout_s
    try:
        primary = info("config", 0, "config-0", assignment.config_nodes[0], str(root / "config-0"))
        mirror = info("config", 1, "config-1", assignment.config_nodes[1], str(root / "config-1"))
        _, port0 = primary.endpoint.rsplit(":", 1)
        _, port1 = mirror.endpoint.rsplit(":", 1)
        _spawn(handle, primary, ["config", "--host", cfg.bind_host, "--port", port0, "--data-dir", primary.data_dir, "--mirror-endpoint", mirror.endpoint, *common], cfg)
        _wait_ready(handle, primary, deadline)
        _spawn(handle, mirror, ["config", "--host", cfg.bind_host, "--port", port1, "--data-dir", mirror.data_dir, "--is-mirror", *common], cfg)
        _wait_ready(handle, mirror, deadline)

        shard_infos = []
        for i, host in enumerate(assignment.shard_nodes):
            w = info("shard", i, f"shard-{i}", host, str(root / f"shard-{i}"))
            argv = [
                "shard", "--host", cfg.bind_host, "--port", w.endpoint.rsplit(":", 1)[1],
                "--data-dir", w.data_dir, "--shard-id", w.name,
                "--config-endpoints", primary.endpoint,
                "--split-threshold", str(cfg.split_threshold),
                "--segment-max-bytes", str(cfg.segment_max_bytes), *common,
            ]
            if w.name in cfg.hang_on_shutdown:
                argv.append("--hang-on-shutdown")
            _spawn(handle, w, argv, cfg)
            shard_infos.append(w)
        for w in shard_infos:
            _wait_ready(handle, w, deadline)
        _wait_registered(handle, [w.name for w in shard_infos], deadline)

        with Connection(primary.endpoint, token) as conn:
            try:
                conn.request("create_collection", {"name": COLLECTION, "index_fields": list(INDEX_FIELDS)})
            except ConflictError:
                pass  # relaunch on an existing data root

        router_infos = []
        for i, host in enumerate(assignment.router_nodes):
            w = info("router", i, f"router-{i}", host)
            argv = [
                "router", "--host", cfg.bind_host, "--port", w.endpoint.rsplit(":", 1)[1],
                "--config-endpoints", f"{primary.endpoint},{mirror.endpoint}",
            ]
            _spawn(handle, w, argv, cfg)
            router_infos.append(w)
        for w in router_infos:
            _wait_ready(handle, w, deadline)
    except BaseException:
        _kill_all(handle)
        _release_lock(root)
        raise
    handle.state = "ready"
    handle.save()
    _update_lock(handle)
    return handle


def _kill_all(handle):
    for w in handle.workers:
        proc = handle._procs.get(w.name)
        if proc is not None and proc.poll() is None:
            proc.kill()
            proc.wait()


def publish_endpoints(handle: ClusterHandle, path) -> Path:
    """Write router endpoints one per line (atomically) and export them to the environment."""
    if handle.state != "ready":
        raise InvalidStateError(f"cannot publish endpoints of a cluster in state {handle.state!r}")
    path = Path(path)
    routers = handle.router_endpoints
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(f"{e}\n" for e in routers))
    os.replace(tmp, path)
    os.environ[ROUTERS_ENV] = ",".join(routers)
    handle.endpoints_file = str(path)
    handle.save()
    return path


def status(handle: ClusterHandle) -> dict:
    """Ping every worker; maps worker name to ``"up"`` or the failure reason."""
    out = {}
    for w in handle.workers:
        try:
            _ping(w.endpoint, handle.cluster_token)
            out[w.name] = "up"
        except ShardBatchError as exc:
            out[w.name] = f"down ({exc.code})"
    return out


def _stop_worker(handle, w: WorkerInfo, grace):
    proc = handle._procs.get(w.name)
    try:
        with Connection(w.endpoint, handle.cluster_token, connect_timeout=2.0) as conn:
            conn.request("shutdown", timeout=2.0)
    except ShardBatchError:
        pass
    try:
        if proc is not None:
            w.exit_status = proc.wait(timeout=grace)
        elif _pid_alive(w.pid):
            w.exit_status = psutil.Process(w.pid).wait(timeout=grace)
        else:
            w.exit_status = w.exit_status if w.exit_status is not None else 0
        return
    except (subprocess.TimeoutExpired, psutil.TimeoutExpired):
        pass
    except psutil.NoSuchProcess:
        w.exit_status = 0
        return
    logger.warning("%s unresponsive after %.1fs; killing", w.name, grace)
    w.forced = True
    if proc is not None:
        proc.kill()
        w.exit_status = proc.wait()
    else:
        try:
            p = psutil.Process(w.pid)
            p.kill()
            w.exit_status = p.wait(timeout=5)
        except psutil.NoSuchProcess:
            w.exit_status = -9


def shutdown(handle: ClusterHandle, grace_s: float | None = None) -> dict:
    """Stop routers, then shards, then config servers; data directories are kept."""
    if handle.state == "stopped":
        return {"state": "stopped", "noop": True, "workers": []}
    if handle.state not in ("ready", "draining", "launching"):
        raise InvalidStateError(f"cannot shut down a cluster in state {handle.state!r}")
    grace = 10.0 if grace_s is None else grace_s
    handle.state = "draining"
    for role in ("router", "shard", "config"):
        for w in reversed(handle.by_role(role)) if role == "config" else handle.by_role(role):
            _stop_worker(handle, w, grace)
    handle.state = "stopped"
    handle.save()
    _release_lock(handle.data_root)
    return {
        "state": "stopped",
        "noop": False,
        "workers": [
            {"name": w.name, "role": w.role, "exit_status": w.exit_status, "forced": w.forced}
            for w in handle.workers
        ],
    }


def launch_from_nodefile(nodefile, base_config: BaseConfig, endpoints_out=None, strict=True) -> ClusterHandle:
    nodes = read_nodefile(nodefile)
    handle = launch(assign_roles(nodes, strict=strict), base_config)
    if endpoints_out:
        publish_endpoints(handle, endpoints_out)
    return handle
