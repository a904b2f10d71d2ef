"""Length-prefixed JSON framing and request/response transport.

A frame is a 4-byte big-endian unsigned length followed by exactly that many
bytes of UTF-8 JSON. The JSON body is an object carrying ``type``,
``req_id``, an optional ``cluster_token`` and a ``payload`` object.

Connections are multiplexed: many requests may be in flight on one socket
and responses are matched to requests by ``req_id``. A ``find`` request is
answered by a stream of ``find_batch`` frames closed by ``end_of_results``.
"""

from __future__ import annotations

import itertools
import json
import logging
import queue
import socket
import socketserver
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import (
    AuthError,
    NodeDownError,
    OversizeError,
    ProtocolError,
    ShardBatchError,
    StaleVersionError,
    TransportError,
    from_code,
)

logger = logging.getLogger(__name__)

MAX_FRAME = 64 * 1024 * 1024
HEADER = struct.Struct(">I")
FIND_PAGE_SIZE = 1000

MESSAGE_TYPES = frozenset(
    {
        "ping",
        "pong",
        "hello",
        "register_shard",
        "create_collection",
        "get_shardmap",
        "report_split",
        "insert_batch",
        "insert_batch_result",
        "find",
        "find_batch",
        "end_of_results",
        "stale_version",
        "ack",
        "error",
        "shutdown",
    }
)


@dataclass
class Envelope:
    type: str
    req_id: int = 0
    payload: dict = field(default_factory=dict)
    cluster_token: str = ""

    def reply(self, type_, payload=None):
        return Envelope(type_, self.req_id, payload if payload is not None else {})


def encode(env: Envelope) -> bytes:
    body = {"type": env.type, "req_id": env.req_id}
    if env.cluster_token:
        body["cluster_token"] = env.cluster_token
    body["payload"] = env.payload
    data = json.dumps(body, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(data) > MAX_FRAME:
        raise OversizeError(f"frame body of {len(data)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(data)) + data


def _parse_body(body: bytes) -> Envelope:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ProtocolError(f"malformed frame body: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("frame body is not a JSON object")
    type_ = obj.get("type")
    if not isinstance(type_, str):
        raise ProtocolError("frame body lacks a string 'type'")
    if type_ not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {type_!r}", type=type_)
    req_id = obj.get("req_id")
    if not isinstance(req_id, int) or isinstance(req_id, bool) or req_id < 0:
        raise ProtocolError("frame body lacks an unsigned integer 'req_id'")
    payload = obj.get("payload", {})
    token = obj.get("cluster_token", "")
    if not isinstance(payload, dict) or not isinstance(token, str):
        raise ProtocolError("payload must be an object and cluster_token a string")
    return Envelope(type_, req_id, payload, token)


def decode_prefix(data) -> tuple[Envelope | None, int]:
    """Decode the first frame in ``data``.

    Returns ``(envelope, bytes_consumed)``, or ``(None, 0)`` when more bytes
    are needed; nothing is consumed in that case.
    """
    if len(data) < HEADER.size:
        return None, 0
    (length,) = HEADER.unpack_from(data, 0)
    if length > MAX_FRAME:
        raise OversizeError(f"declared frame length {length} exceeds {MAX_FRAME}")
    end = HEADER.size + length
    if len(data) < end:
        return None, 0
    return _parse_body(bytes(data[HEADER.size:end])), end


def decode(data: bytes) -> Envelope | None:
    """Decode one complete frame; None means the frame is still partial."""
    env, used = decode_prefix(data)
    if env is not None and used != len(data):
        raise ProtocolError(f"length mismatch: frame is {used} bytes, got {len(data)}")
    return env


class FrameDecoder:
    """Incremental decoder tolerant of arbitrary chunk boundaries."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[Envelope]:
        self._buf += chunk
        out = []
        pos = 0
        while True:
            env, used = decode_prefix(memoryview(self._buf)[pos:])
            if env is None:
                break
            out.append(env)
            pos += used
        if pos:
            del self._buf[:pos]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


def raise_for(env: Envelope) -> Envelope:
    """Turn ``error`` and ``stale_version`` responses into exceptions."""
    if env.type == "error":
        p = env.payload
        raise from_code(p.get("code", "internal"), p.get("message", ""), p.get("details"))
    if env.type == "stale_version":
        raise StaleVersionError("stale shard map version", **env.payload)
    return env


_CLOSED = object()


class Connection:
    """Client side of a multiplexed framed connection."""

    def __init__(self, endpoint: str, token: str = "", connect_timeout: float = 5.0):
        self.endpoint = endpoint
        self.token = token
        host, port = parse_endpoint(endpoint)
        try:
            self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        except ConnectionRefusedError:
            raise NodeDownError(f"{endpoint} refused connection", endpoint=endpoint) from None
        except socket.timeout:
            raise TransportError(f"connect to {endpoint} timed out", endpoint=endpoint) from None
        except OSError as exc:
            raise NodeDownError(f"{endpoint}: {exc}", endpoint=endpoint) from None
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._ids = itertools.count(1)
        self._waiters: dict[int, queue.Queue] = {}
        self._wlock = threading.Lock()
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name=f"conn-{endpoint}")
        self._reader.start()

    @property
    def closed(self):
        return self._closed

    def _read_loop(self):
        decoder = FrameDecoder()
        try:
            while True:
                chunk = self._sock.recv(1 << 20)
                if not chunk:
                    break
                for env in decoder.feed(chunk):
                    q = self._waiters.get(env.req_id)
                    if q is not None:
                        q.put(env)
        except (OSError, ProtocolError) as exc:
            logger.debug("connection to %s closed: %s", self.endpoint, exc)
        finally:
            self._closed = True
            for q in list(self._waiters.values()):
                q.put(_CLOSED)

    def _send(self, env: Envelope):
        frame = encode(env)
        if self._closed:
            raise NodeDownError(f"connection to {self.endpoint} is closed", endpoint=self.endpoint)
        try:
            with self._wlock:
                self._sock.sendall(frame)
        except OSError as exc:
            self._closed = True
            raise NodeDownError(f"{self.endpoint}: {exc}", endpoint=self.endpoint) from None

    def _open(self, type_, payload):
        req_id = next(self._ids)
        q: queue.Queue = queue.Queue()
        self._waiters[req_id] = q
        try:
            self._send(Envelope(type_, req_id, payload, self.token))
        except Exception:
            self._waiters.pop(req_id, None)
            raise
        return req_id, q

    def _next(self, q, timeout):
        try:
            env = q.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"request to {self.endpoint} timed out", endpoint=self.endpoint) from None
        if env is _CLOSED:
            raise NodeDownError(f"{self.endpoint} closed the connection", endpoint=self.endpoint)
        return env

    def request(self, type_: str, payload: dict | None = None, timeout: float = 30.0) -> Envelope:
        """Send one request and return its (non-error) response."""
        req_id, q = self._open(type_, payload or {})
        try:
            return raise_for(self._next(q, timeout))
        finally:
            self._waiters.pop(req_id, None)

    def stream(self, type_: str, payload: dict | None = None, timeout: float = 30.0):
        """Yield response frames of a streamed request until ``end_of_results``."""
        req_id, q = self._open(type_, payload or {})
        try:
            while True:
                env = raise_for(self._next(q, timeout))
                if env.type == "end_of_results":
                    return
                yield env
        finally:
            self._waiters.pop(req_id, None)

    def close(self):
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def request(endpoint: str, env: Envelope, timeout_ms: int = 30000) -> Envelope:
    """One-shot request over a fresh connection.

    The request is sent with its own ``req_id``; the response echoing it is
    returned. Error responses raise the matching exception.
    """
    host, port = parse_endpoint(endpoint)
    timeout = timeout_ms / 1000.0
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except ConnectionRefusedError:
        raise NodeDownError(f"{endpoint} refused connection", endpoint=endpoint) from None
    except socket.timeout:
        raise TransportError(f"connect to {endpoint} timed out", endpoint=endpoint) from None
    except OSError as exc:
        raise NodeDownError(f"{endpoint}: {exc}", endpoint=endpoint) from None
    decoder = FrameDecoder()
    try:
        sock.sendall(encode(env))
        while True:
            try:
                chunk = sock.recv(1 << 16)
            except socket.timeout:
                raise TransportError(f"request to {endpoint} timed out", endpoint=endpoint) from None
            if not chunk:
                raise NodeDownError(f"{endpoint} closed the connection", endpoint=endpoint)
            for resp in decoder.feed(chunk):
                if resp.req_id == env.req_id:
                    return raise_for(resp)
    finally:
        sock.close()


class Responder:
    """Writes response frames for one request back to its connection."""

    def __init__(self, conn, req_id):
        self._conn = conn
        self.req_id = req_id

    def send(self, type_, payload=None):
        self._conn.send_env(Envelope(type_, self.req_id, payload or {}))

    def error(self, exc: ShardBatchError):
        self.send("error", exc.to_payload())

    def send_raw_docs(self, raw_docs):
        """Send a ``find_batch`` page whose documents are already JSON-encoded."""
        body = b'{"type":"find_batch","req_id":%d,"payload":{"docs":[%s]}}' % (
            self.req_id,
            b",".join(raw_docs),
        )
        if len(body) > MAX_FRAME:
            raise OversizeError(f"find page of {len(body)} bytes exceeds {MAX_FRAME}")
        self._conn.send_frame(HEADER.pack(len(body)) + body)


class _ConnHandler(socketserver.BaseRequestHandler):
    def setup(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._wlock = threading.Lock()
        self.alive = True
        self.server.track(self, True)

    def finish(self):
        self.server.track(self, False)

    def send_env(self, env):
        self.send_frame(encode(env))

    def send_frame(self, frame):
        with self._wlock:
            try:
                self.request.sendall(frame)
            except OSError:
                self.alive = False
                raise

    def handle(self):
        decoder = FrameDecoder()
        server = self.server
        while True:
            try:
                chunk = self.request.recv(1 << 20)
            except OSError:
                break
            if not chunk:
                break
            try:
                envs = decoder.feed(chunk)
            except ProtocolError as exc:
                try:
                    self.send_env(Envelope("error", 0, exc.to_payload()))
                except OSError:
                    pass
                break
            for env in envs:
                server.submit(self, env)
        self.alive = False


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, owner):
        self.owner = owner
        self._conns = set()
        self._conns_lock = threading.Lock()
        super().__init__(address, _ConnHandler)

    def track(self, handler, add):
        with self._conns_lock:
            (self._conns.add if add else self._conns.discard)(handler)

    def close_all(self):
        with self._conns_lock:
            conns = list(self._conns)
        for h in conns:
            try:
                h.request.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def submit(self, handler, env):
        self.owner._submit(handler, env)


class FramedServer:
    """Base class for config, shard and router servers.

    Subclasses register handlers named ``on_<type>(env, responder)``. A
    handler either returns a ``(type, payload)`` tuple that is sent as the
    response, or uses the responder itself (for streamed replies) and
    returns None.
    """

    role = "server"
    require_token = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0, cluster_token: str = "", max_workers: int = 64):
        self.cluster_token = cluster_token
        self._tcp = _TCPServer((host, port), self)
        self.host, self.port = self._tcp.server_address[:2]
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix=self.role)
        self._thread = None
        self.stopped = threading.Event()

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self):
        self._thread = threading.Thread(target=self._tcp.serve_forever, args=(0.05,), daemon=True, name=f"{self.role}-accept")
        self._thread.start()
        return self

    def serve_forever(self):
        try:
            self._tcp.serve_forever(0.05)
        finally:
            self.stopped.set()

    def stop(self):
        self._tcp.shutdown()
        self._tcp.close_all()
        self._tcp.server_close()
        self._pool.shutdown(wait=False, cancel_futures=True)
        self.close()
        self.stopped.set()

    def close(self):
        """Release resources; overridden by servers holding files or connections."""

    def _submit(self, handler, env):
        try:
            self._pool.submit(self._dispatch, handler, env)
        except RuntimeError:
            pass

    def check_token(self, env: Envelope):
        if self.require_token and env.cluster_token != self.cluster_token:
            raise AuthError(f"{self.role} rejects requests without the cluster token")

    def _dispatch(self, handler, env):
        responder = Responder(handler, env.req_id)
        try:
            self.check_token(env)
            method = getattr(self, f"on_{env.type}", None)
            if method is None:
                raise ProtocolError(f"{self.role} does not handle {env.type!r}", type=env.type)
            result = method(env, responder)
            if result is not None:
                responder.send(*result)
        except ShardBatchError as exc:
            self._safe(responder.error, exc)
        except OSError:
            pass
        except Exception as exc:
            logger.exception("%s failed handling %s", self.role, env.type)
            self._safe(responder.error, ShardBatchError(f"{type(exc).__name__}: {exc}"))

    @staticmethod
    def _safe(fn, *args):
        try:
            fn(*args)
        except OSError:
            pass

    def on_ping(self, env, responder):
        return "pong", {"role": self.role}

    def on_shutdown(self, env, responder):
        responder.send("ack", {"role": self.role})
        threading.Thread(target=self.stop, daemon=True).start()
