import http.client
import json

import pytest

from qedgeproxy.model import ConfigurationError, InstanceId, ServiceSpec
from qedgeproxy.pool import PoolSettings
from qedgeproxy.routing import RouterKind
from qedgeproxy.server import (
    INSTANCE_HEADER,
    RTT_HEADER,
    Backend,
    FileRegistry,
    InMemoryRegistry,
    MissingTargetError,
    ProxyConfig,
    ProxyServer,
    QEdgeProxy,
    RegistryWatcher,
    load_proxy_config,
    parse_registry,
    parse_target,
)

from .helpers import Stub, write_registry

SVC = "echo"


def test_parse_target():
    assert parse_target({"x-qedge-service": "  dps "}) == "dps"
    assert parse_target({"Svc": "a"}, header="svc") == "a"
    for headers in ({}, {"X-Qedge-Service": "  "}):
        with pytest.raises(MissingTargetError):
            parse_target(headers)


def test_parse_registry():
    text = "# comment\necho 1 n1 127.0.0.1:9001\necho s2 n2 localhost:9002  # trailing\n\n"
    backends = parse_registry(text)
    assert [b.address for b in backends.values()] == ["127.0.0.1:9001", "localhost:9002"]
    assert InstanceId(SVC, 2, "n2") in backends


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("echo 1 n1", "expected 4 fields"),
        ("echo x n1 h:1", "positive integer"),
        ("echo 1 n1 h:0", "malformed address"),
        ("echo 1 n1 nohost", "malformed address"),
        ("echo 1 n1 h:1\necho 1 n1 h:2", "line 2: duplicate"),
    ],
)
def test_parse_registry_errors(text, fragment):
    with pytest.raises(ConfigurationError, match=fragment):
        parse_registry(text)


def _backend(i, port, node=None):
    return Backend(InstanceId(SVC, i, node or f"n{i}"), "127.0.0.1", port)


def test_watcher_diffs():
    reg = InMemoryRegistry([_backend(1, 9001), _backend(2, 9002)])
    w = RegistryWatcher(reg, clock=lambda: 1.0)
    first = w.poll()
    assert [(ev.kind.name, ev.instance.ordinal) for ev, _ in first] == [("ADDED", 1), ("ADDED", 2)]
    assert w.poll() == []
    reg.set([_backend(1, 9001)])
    assert [(ev.kind.name, ev.instance.ordinal) for ev, _ in w.poll()] == [("REMOVED", 2)]
    reg.set([_backend(1, 9005)])
    moved = w.poll()
    assert [(ev.kind.name, b.port if b else None) for ev, b in moved] == [("REMOVED", None), ("ADDED", 9005)]


def test_watcher_keeps_state_when_unreadable(tmp_path):
    path = tmp_path / "reg"
    path.write_text("echo 1 n1 127.0.0.1:9001\n")
    w = RegistryWatcher(FileRegistry(path))
    assert len(w.poll()) == 1
    path.write_text("echo 1 n1\n")  # half-written file
    assert w.poll() == [] and w.failures == 1
    path.unlink()
    assert w.poll() == [] and w.failures == 2
    assert w.backoff(1.0) == 4.0
    path.write_text("echo 1 n1 127.0.0.1:9001\n")
    assert w.poll() == [] and w.failures == 0


def test_config_rejects_proximity_and_empty_services():
    with pytest.raises(ConfigurationError):
        ProxyConfig({}, InMemoryRegistry())
    with pytest.raises(ConfigurationError):
        ProxyConfig({SVC: ServiceSpec.latency(SVC, 80)}, InMemoryRegistry(),
                    router=RouterKind.proximity(0.5))


def test_load_proxy_config(tmp_path):
    cfg = load_proxy_config(
        "services:\n  - {name: echo, max_response_time_ms: 50}\n"
        "registry: {file: reg.txt, watch: false}\nbind: 127.0.0.1:0\n"
        "estimator: {beta: 0.5, violation_limit: 2}\n",
        tmp_path,
    )
    assert cfg.registry.path == tmp_path / "reg.txt"
    assert cfg.poll_interval is None
    assert cfg.settings == PoolSettings(beta=0.5, violation_limit=2)
    assert cfg.services[SVC].requirement.max_response_time == 50
    with pytest.raises(ConfigurationError):
        load_proxy_config("services:\n  - {name: echo, max_response_time_ms: 50}\n")


# -- end to end ------------------------------------------------------------------

def _get(addr, path="/", service=SVC):
    conn = http.client.HTTPConnection(*addr, timeout=10)
    headers = {"X-Qedge-Service": service} if service else {}
    conn.request("GET", path, headers=headers)
    resp = conn.getresponse()
    body = resp.read()
    conn.close()
    return resp.status, dict(resp.getheaders()), body


def _members(addr):
    status, _, body = _get(addr, "/qedge/pools", service=None)
    assert status == 200
    pool = json.loads(body)["pools"][SVC]
    return sorted(pool["members"])


@pytest.fixture
def cluster(tmp_path):
    stubs = {i: Stub(f"b{i}") for i in (1, 2, 3)}
    reg = tmp_path / "registry.txt"
    write_registry(reg, {i: s.port for i, s in stubs.items()})
    cfg = ProxyConfig(
        services={SVC: ServiceSpec.latency(SVC, 2000)},
        registry=FileRegistry(reg),
        bind="127.0.0.1:0",
        poll_interval=None,
    )
    server = ProxyServer(cfg).start()
    yield server, stubs, reg
    server.stop()
    for s in stubs.values():
        try:
            s.kill()
        except OSError:
            pass


def test_end_to_end_lifecycle(cluster):
    server, stubs, reg = cluster
    addr = server.address

    # round robin across the whole pool
    bodies = [_get(addr)[2].decode() for _ in range(9)]
    assert sorted(set(bodies)) == ["b1", "b2", "b3"]
    assert all(bodies.count(b) == 3 for b in ("b1", "b2", "b3"))
    assert all(bodies[i] != bodies[i + 1] for i in range(8))
    status, headers, _ = _get(addr)
    assert INSTANCE_HEADER in headers and float(headers[RTT_HEADER]) >= 0
    assert len(_members(addr)) == 3

    # kill b2: exactly one transport error, then it is ejected
    stubs[2].kill()
    results = [_get(addr) for _ in range(3)]
    failures = [r for r in results if r[0] == 502]
    assert len(failures) == 1
    assert json.loads(failures[0][2])["error"] == "backend-unreachable"
    pools = _members(addr)
    assert len(pools) == 2 and not any(m.endswith("/s2@n2") for m in pools)
    after = [_get(addr) for _ in range(20)]
    assert all(st == 200 for st, _, _ in after)
    assert {b.decode() for _, _, b in after} == {"b1", "b3"}

    # bring it back on a new port and point the registry there
    stubs[2] = Stub("b2")
    write_registry(reg, {i: s.port for i, s in stubs.items()})
    events = server.proxy.sync_registry()
    assert [ev.kind.name for ev in events] == ["REMOVED", "ADDED"]
    assert len(_members(addr)) == 3
    assert "b2" in {_get(addr)[2].decode() for _ in range(3)}


def test_post_body_is_forwarded(cluster):
    server, _, _ = cluster
    conn = http.client.HTTPConnection(*server.address, timeout=10)
    conn.request("POST", "/x", body=b"payload", headers={"X-Qedge-Service": SVC})
    resp = conn.getresponse()
    assert resp.status == 200 and resp.read() == b"payload"
    conn.close()


def test_request_errors(cluster):
    server, _, _ = cluster
    assert _get(server.address, service=None)[0] == 400
    status, _, body = _get(server.address, service="nope")
    assert status == 404 and json.loads(body)["error"] == "unknown-service"


def test_empty_pool_is_503_and_recovers(tmp_path):
    stub = Stub("only")
    reg = tmp_path / "registry.txt"
    write_registry(reg, {1: stub.port})
    proxy = QEdgeProxy(ProxyConfig({SVC: ServiceSpec.latency(SVC, 5000)}, FileRegistry(reg)))
    try:
        proxy.sync_registry()
        assert proxy.forward("GET", "/", {"X-Qedge-Service": SVC}, b"")[0] == 200
        stub.kill()
        assert proxy.forward("GET", "/", {"X-Qedge-Service": SVC}, b"")[0] == 502
        status, _, body = proxy.forward("GET", "/", {"X-Qedge-Service": SVC}, b"")
        assert status == 503 and json.loads(body)["error"] == "no-eligible-instance"
        # re-registration is the re-admission path
        stub = Stub("only")
        write_registry(reg, {1: stub.port})
        proxy.sync_registry()
        assert proxy.forward("GET", "/", {"X-Qedge-Service": SVC}, b"")[2] == b"only"
    finally:
        stub.kill()


def test_no_backends_is_503(tmp_path):
    reg = tmp_path / "registry.txt"
    reg.write_text("")
    proxy = QEdgeProxy(ProxyConfig({SVC: ServiceSpec.latency(SVC, 80)}, FileRegistry(reg),
                                   router=RouterKind.nodeport()))
    proxy.sync_registry()
    status, _, body = proxy.forward("GET", "/", {"X-Qedge-Service": SVC}, b"")
    assert status == 503 and json.loads(body)["error"] == "no-instance"


def test_unreachable_backend_never_admitted(tmp_path):
    stub = Stub("gone")
    port = stub.port
    stub.kill()
    reg = tmp_path / "registry.txt"
    write_registry(reg, {1: port})
    proxy = QEdgeProxy(ProxyConfig({SVC: ServiceSpec.latency(SVC, 80)}, FileRegistry(reg)))
    proxy.sync_registry()
    assert proxy.forward("GET", "/", {"X-Qedge-Service": SVC}, b"")[0] == 503
    view = proxy.pools_view()
    assert view["pools"][SVC]["members"] == []
    json.dumps(view)  # infinite estimates are rendered JSON-safe


def test_engine_equivalence_with_simulation_driver():
    from qedgeproxy.model import ClusterSnapshot, Measurement
    from qedgeproxy.pool import initial_estimate
    from qedgeproxy.routing import QEdgeRouter

    rtts = {1: 10.0, 2: 90.0, 3: 30.0}
    spec = ServiceSpec.latency(SVC, 80)
    reg = InMemoryRegistry([_backend(i, 9000 + i) for i in (1, 2)])
    proxy = QEdgeProxy(ProxyConfig({SVC: spec}, reg))
    proxy.probe_rtt = lambda inst: rtts[inst.ordinal]
    settings = PoolSettings()
    sim = QEdgeRouter(ClusterSnapshot(), {SVC: spec},
                      lambda inst: initial_estimate(rtts[inst.ordinal], settings), settings)

    def step(registry_state=None, samples=()):
        if registry_state is not None:
            reg.set(registry_state)
        for ev in proxy.sync_registry():
            sim.on_cluster_event(ev)
        for i, ms in samples:
            inst = InstanceId(SVC, i, f"n{i}")
            proxy.record(Measurement(inst, ms, 0))
            sim.observe(Measurement(inst, ms, 0))
        return proxy.engine.pool(SVC).to_dict() == sim.pool(SVC).to_dict()

    assert step()
    assert step(samples=[(1, 20.0), (1, 95.0)])
    assert step([_backend(i, 9000 + i) for i in (1, 2, 3)], [(3, 12.0)])
    assert step([_backend(3, 9003)], [(3, 81.0)])
    assert proxy.engine.pool(SVC).members == []
