"""HTTP reverse proxy exposing the QoS-pool router.

Clients name the target service in a request header (``X-Qedge-Service`` by
default). Backends come from a registry source, normally a watched text file
with one backend per line::

    # service  instance  node     host:port
    dps        1         edge-a   10.0.0.5:8000

Each forwarded request's wall-clock response time is fed back into the pool,
and a failed connection counts as an SLO violation.
"""

from __future__ import annotations

import http.client
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Mapping, Optional, Union

import yaml

from .model import (
    ClusterEvent,
    ClusterSnapshot,
    ConfigurationError,
    InstanceId,
    Measurement,
    ServiceName,
    ServiceSpec,
)
from .pool import PoolSettings, initial_estimate
from .routing import (
    NoEligibleInstanceError,
    NoInstanceError,
    Router,
    RouterKind,
    make_router,
)

log = logging.getLogger(__name__)

DEFAULT_HEADER = "X-Qedge-Service"
INSTANCE_HEADER = "X-Qedge-Instance"
RTT_HEADER = "X-Qedge-Rtt-Ms"
POOLS_PATH = "/qedge/pools"

HOP_BY_HOP = {
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailers",
    "transfer-encoding",
    "upgrade",
    "content-length",
}


class MissingTargetError(ValueError):
    pass


def parse_target(headers: Mapping[str, str], header: str = DEFAULT_HEADER) -> ServiceName:
    """Service name from the routing header, trimmed and case-preserved."""
    value = None
    wanted = header.lower()
    for key, val in headers.items():
        if key.lower() == wanted:
            value = val
            break
    if value is None or not value.strip():
        raise MissingTargetError(f"missing {header} header")
    return value.strip()


# -- registry ------------------------------------------------------------------

@dataclass(frozen=True)
class Backend:
    instance: InstanceId
    host: str
    port: int

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"


def _parse_address(text: str, allow_zero: bool = False) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    lowest = 0 if allow_zero else 1
    if not sep or not host or not port.isdigit() or not lowest <= int(port) < 65536:
        raise ValueError(f"malformed address {text!r}, expected host:port")
    return host, int(port)


def _parse_ordinal(text: str) -> int:
    digits = text[1:] if text[:1] in ("s", "S") else text
    if not digits.isdigit() or int(digits) < 1:
        raise ValueError(f"instance id must be a positive integer, got {text!r}")
    return int(digits)


def parse_registry(text: str) -> dict[InstanceId, Backend]:
    """Parse registry lines ``service instance-id node host:port``."""
    backends: dict[InstanceId, Backend] = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            problems.append(f"line {lineno}: expected 4 fields, got {len(parts)}")
            continue
        service, ident, node, addr = parts
        try:
            inst = InstanceId(service, _parse_ordinal(ident), node)
            host, port = _parse_address(addr)
        except ValueError as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        if inst in backends:
            problems.append(f"line {lineno}: duplicate instance {inst}")
            continue
        backends[inst] = Backend(inst, host, port)
    if problems:
        raise ConfigurationError("; ".join(problems))
    return backends


class FileRegistry:
    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def read(self) -> dict[InstanceId, Backend]:
        return parse_registry(self.path.read_text(encoding="utf-8"))


class InMemoryRegistry:
    """Registry fed from code, e.g. by an emulator or a test."""

    def __init__(self, backends=()):
        self._lock = threading.Lock()
        self._backends = {b.instance: b for b in backends}

    def set(self, backends) -> None:
        with self._lock:
            self._backends = {b.instance: b for b in backends}

    def read(self) -> dict[InstanceId, Backend]:
        with self._lock:
            return dict(self._backends)


class RegistryWatcher:
    """Turns successive registry states into instance added/removed events.

    A backend whose node or address changed is reported as removed and then
    added again, so it is re-estimated from scratch.
    """

    def __init__(self, source, clock=time.monotonic):
        self.source = source
        self.known: dict[InstanceId, Backend] = {}
        self.failures = 0
        self._clock = clock

    def poll(self) -> list[tuple[ClusterEvent, Optional[Backend]]]:
        try:
            current = self.source.read()
        except (OSError, ConfigurationError) as exc:
            self.failures += 1
            log.warning("registry unreadable (%d consecutive): %s", self.failures, exc)
            return []
        self.failures = 0
        now = int(self._clock() * 1000)
        events = []
        for inst in sorted(self.known):
            new = current.get(inst)
            old = self.known[inst]
            if new is None or (new.instance.node, new.address) != (old.instance.node, old.address):
                events.append((ClusterEvent.removed(old.instance, now), None))
        for inst in sorted(current):
            new = current[inst]
            old = self.known.get(inst)
            if old is None or (new.instance.node, new.address) != (old.instance.node, old.address):
                events.append((ClusterEvent.added(new.instance, now), new))
        self.known = current
        return events

    def backoff(self, base: float, cap: float = 30.0) -> float:
        return min(cap, base * (2 ** self.failures))


# -- configuration -------------------------------------------------------------

@dataclass
class ProxyConfig:
    services: dict[ServiceName, ServiceSpec]
    registry: object
    bind: str = "127.0.0.1:8080"
    router: RouterKind = field(default_factory=RouterKind.qedge)
    settings: PoolSettings = field(default_factory=PoolSettings)
    fallback_on_empty_pool: bool = False
    header: str = DEFAULT_HEADER
    poll_interval: Optional[float] = 1.0
    probe_timeout: float = 1.0
    backend_timeout: float = 10.0

    def __post_init__(self):
        if not self.services:
            raise ConfigurationError("at least one service spec is required")
        if self.router.name == "proximity":
            raise ConfigurationError("service mode supports the qedge and nodeport routers")


def load_proxy_config(text: str, base_dir: Optional[Path] = None) -> ProxyConfig:
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigurationError("proxy config must be a mapping")
    services = {}
    for entry in data.get("services", []):
        spec = ServiceSpec.latency(str(entry["name"]), float(entry["max_response_time_ms"]))
        services[spec.name] = spec
    reg = data.get("registry")
    watch = True
    if isinstance(reg, dict):
        watch = bool(reg.get("watch", True))
        reg = reg.get("file")
    if not reg:
        raise ConfigurationError("proxy config needs a registry file")
    path = Path(reg)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    est = data.get("estimator", {}) or {}
    return ProxyConfig(
        services=services,
        registry=FileRegistry(path),
        bind=str(data.get("bind", "127.0.0.1:8080")),
        router=RouterKind(str(data.get("router", "qedge"))),
        settings=PoolSettings(
            beta=float(est.get("beta", 0.3)),
            violation_limit=est.get("violation_limit", 1),
        ),
        fallback_on_empty_pool=bool(data.get("fallback_on_empty_pool", False)),
        header=str(data.get("header", DEFAULT_HEADER)),
        poll_interval=float(data.get("poll_interval", 1.0)) if watch else None,
    )


# -- the proxy -------------------------------------------------------------------

def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_json_safe(v) for v in value]
    return value


class QEdgeProxy:
    """Routing engine plus registry state, independent of the HTTP plumbing."""

    def __init__(self, config: ProxyConfig):
        self.config = config
        self.lock = threading.RLock()
        self.backends: dict[InstanceId, Backend] = {}
        self._probed: dict[InstanceId, float] = {}
        self.watcher = RegistryWatcher(config.registry)
        self.engine: Router = make_router(
            config.router,
            ClusterSnapshot(),
            config.services,
            initial_estimate=self._initial_estimate,
            probe=self.probe_rtt,
            settings=config.settings,
            fallback_on_empty_pool=config.fallback_on_empty_pool,
        )

    def probe_rtt(self, instance: InstanceId) -> float:
        """One HEAD round trip to the backend, in ms; +inf when unreachable."""
        backend = self.backends.get(instance)
        if backend is None:
            return math.inf
        start = time.perf_counter()
        try:
            conn = http.client.HTTPConnection(
                backend.host, backend.port, timeout=self.config.probe_timeout
            )
            try:
                conn.request("HEAD", "/")
                conn.getresponse().read()
            finally:
                conn.close()
        except OSError as exc:
            log.info("probe of %s failed: %s", backend.address, exc)
            return math.inf
        return (time.perf_counter() - start) * 1000.0

    def _initial_estimate(self, instance: InstanceId) -> float:
        rtt = self._probed.pop(instance, None)
        if rtt is None:
            rtt = self.probe_rtt(instance)
        return initial_estimate(rtt, self.config.settings) if math.isfinite(rtt) else math.inf

    def sync_registry(self) -> list[ClusterEvent]:
        """Run one registry update cycle."""
        changes = self.watcher.poll()
        # probe new backends before taking the engine lock
        for ev, backend in changes:
            if backend is not None:
                self.backends[backend.instance] = backend
                self._probed[backend.instance] = self.probe_rtt(backend.instance)
        with self.lock:
            for ev, backend in changes:
                if backend is not None:
                    self.backends[backend.instance] = backend
                self.engine.on_cluster_event(ev)
            self._probed.clear()
        return [ev for ev, _ in changes]

    def pools_view(self) -> dict:
        with self.lock:
            pools = getattr(self.engine, "pools", {})
            out = {name: pool.to_dict() for name, pool in sorted(pools.items())}
            for name, view in out.items():
                for inst, row in zip(sorted(pools[name].histories), view["instances"]):
                    backend = self.backends.get(inst)
                    row["address"] = backend.address if backend else None
        return _json_safe({"router": self.config.router.name, "pools": out})

    def choose(self, service: ServiceName) -> Backend:
        with self.lock:
            decision = self.engine.route(service, int(time.monotonic() * 1000))
            return self.backends[decision.instance]

    def record(self, m: Measurement) -> None:
        with self.lock:
            self.engine.observe(m)

    def forward(self, method: str, path: str, headers, body: bytes):
        """Proxy one request; returns ``(status, headers, body)``."""
        if method == "GET" and path.split("?", 1)[0] == POOLS_PATH:
            payload = json.dumps(self.pools_view(), indent=2).encode()
            return 200, [("Content-Type", "application/json")], payload
        try:
            service = parse_target(headers, self.config.header)
        except MissingTargetError as exc:
            return _error(400, "missing-service-header", str(exc))
        if service not in self.config.services:
            return _error(404, "unknown-service", f"unknown service {service!r}")
        try:
            backend = self.choose(service)
        except NoEligibleInstanceError:
            return _error(503, "no-eligible-instance", f"QoS pool for {service!r} is empty")
        except NoInstanceError:
            return _error(503, "no-instance", f"no live instance of {service!r}")

        fwd_headers = {k: v for k, v in headers.items() if k.lower() not in HOP_BY_HOP}
        fwd_headers["Host"] = backend.address
        start = time.perf_counter()
        at = int(time.monotonic() * 1000)
        try:
            conn = http.client.HTTPConnection(
                backend.host, backend.port, timeout=self.config.backend_timeout
            )
            try:
                conn.request(method, path, body=body or None, headers=fwd_headers)
                resp = conn.getresponse()
                payload = resp.read()
                status = resp.status
                resp_headers = [(k, v) for k, v in resp.getheaders() if k.lower() not in HOP_BY_HOP]
            finally:
                conn.close()
        except (OSError, http.client.HTTPException) as exc:
            log.warning("backend %s failed: %s", backend.address, exc)
            self.record(Measurement.transport_error(backend.instance, at))
            status, hdrs, payload = _error(502, "backend-unreachable", str(exc))
            hdrs.append((INSTANCE_HEADER, str(backend.instance)))
            return status, hdrs, payload
        elapsed = (time.perf_counter() - start) * 1000.0
        self.record(Measurement(backend.instance, elapsed, at))
        resp_headers.append((INSTANCE_HEADER, str(backend.instance)))
        resp_headers.append((RTT_HEADER, f"{elapsed:.3f}"))
        return status, resp_headers, payload


def _error(status: int, reason: str, message: str):
    body = json.dumps({"error": reason, "message": message}).encode()
    return status, [("Content-Type", "application/json")], body


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    proxy: QEdgeProxy  # set on the per-server subclass

    def _read_body(self) -> bytes:
        if self.headers.get("Transfer-Encoding", "").lower() == "chunked":
            chunks = []
            while True:
                size = int(self.rfile.readline().split(b";", 1)[0].strip() or b"0", 16)
                if size == 0:
                    while self.rfile.readline() not in (b"\r\n", b"\n", b""):
                        pass
                    return b"".join(chunks)
                chunks.append(self.rfile.read(size))
                self.rfile.readline()
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _handle(self):
        body = self._read_body()
        status, headers, payload = self.proxy.forward(self.command, self.path, self.headers, body)
        self.send_response(status)
        for k, v in headers:
            self.send_header(k, v)
        self.send_header("Content-Length", str(0 if self.command == "HEAD" else len(payload)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(payload)

    do_GET = do_POST = do_PUT = do_DELETE = do_PATCH = do_HEAD = do_OPTIONS = _handle

    def log_message(self, format, *args):
        log.debug("%s - %s", self.address_string(), format % args)


class ProxyServer:
    """Threaded HTTP front end plus the registry poller."""

    def __init__(self, config: ProxyConfig):
        self.proxy = QEdgeProxy(config)
        host, port = _parse_address(config.bind, allow_zero=True)
        handler = type("BoundHandler", (_Handler,), {"proxy": self.proxy})
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    def _poll_loop(self, interval: float) -> None:
        while not self._stop.wait(self.proxy.watcher.backoff(interval)):
            try:
                self.proxy.sync_registry()
            except Exception:
                log.exception("registry update failed")

    def start(self) -> "ProxyServer":
        self.proxy.sync_registry()
        t = threading.Thread(target=self.httpd.serve_forever, name="qedge-http", daemon=True)
        t.start()
        self._threads.append(t)
        interval = self.proxy.config.poll_interval
        if interval:
            p = threading.Thread(target=self._poll_loop, args=(interval,), name="qedge-registry", daemon=True)
            p.start()
            self._threads.append(p)
        return self

    def stop(self) -> None:
        self._stop.set()
        self.httpd.shutdown()
        self.httpd.server_close()
        for t in self._threads:
            t.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(config: ProxyConfig) -> None:
    """Run the proxy until interrupted."""
    server = ProxyServer(config).start()
    host, port = server.address
    log.info("qedge proxy listening on %s:%d", host, port)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
