from qedgeproxy.emulator import Topology, paper_topology
from qedgeproxy.model import ClusterSnapshot, InstanceId, ServiceSpec
from qedgeproxy.scenarios import dps_instance


def s(i: int) -> InstanceId:
    return dps_instance(i)


def path_latency_oracle(topology: Topology, a: str, b: str) -> float:
    """Enumerate every simple path between ``a`` and ``b`` by DFS and sum its delays.

    Independent of the library's BFS; on a tree exactly one path exists.
    """
    adj = {v: [] for v in topology.vertices}
    for link in topology.links:
        adj[link.a].append((link.b, link.one_way_delay))
        adj[link.b].append((link.a, link.one_way_delay))
    found = []

    def dfs(v, seen, total):
        if v == b:
            found.append(total)
            return
        for w, d in adj[v]:
            if w not in seen:
                dfs(w, seen | {w}, total + d)

    dfs(a, {a}, 0.0)
    assert len(found) == 1, f"expected a unique path, found {len(found)}"
    return found[0]


# -- randomized pool operation sequences ------------------------------------

from hypothesis import strategies as st  # noqa: E402

from qedgeproxy.model import ClusterEvent, ClusterSnapshot, Measurement, apply_cluster_event  # noqa: E402
from qedgeproxy.pool import EnvironmentEvent, PoolSettings, QoSPool, on_environment_event  # noqa: E402

POOL_NODES = ("n1", "n2", "n3")


def pool_instance(ordinal: int) -> InstanceId:
    return InstanceId("svc", ordinal, POOL_NODES[ordinal % len(POOL_NODES)])


ordinals = st.integers(1, 6)
latencies = st.floats(0, 200, allow_nan=False)

pool_ops = st.lists(
    st.one_of(
        st.tuples(st.just("measure"), ordinals, latencies),
        st.tuples(st.just("error"), ordinals),
        st.tuples(st.just("add"), ordinals, latencies),
        st.tuples(st.just("remove"), ordinals),
        st.tuples(st.just("env"), st.sets(st.sampled_from(POOL_NODES), min_size=1), latencies),
    ),
    max_size=60,
)
initial_estimates = st.dictionaries(ordinals, latencies, max_size=6)


def replay_pool_ops(spec, initial, ops, settings, check=None):
    """Drive a fresh pool through ``ops``; ``check(pool, snapshot, op, before)`` runs after each step.

    Ops naming an instance the pool does not track are skipped for
    measurements and applied as a warning no-op for removals.
    """
    snapshot = ClusterSnapshot.of([pool_instance(i) for i in initial], POOL_NODES)
    pool = QoSPool.create(spec, snapshot, {pool_instance(i): v for i, v in initial.items()},
                          settings=settings)
    for op in ops:
        before = list(pool.members)
        kind, *args = op
        if kind in ("measure", "error"):
            inst = pool_instance(args[0])
            if inst not in pool.histories:
                continue
            m = (Measurement(inst, args[1], 0) if kind == "measure"
                 else Measurement.transport_error(inst, 0))
            pool.record_measurement(m)
        elif kind == "add":
            ev = ClusterEvent.added(pool_instance(args[0]))
            snapshot = apply_cluster_event(snapshot, ev)
            pool.on_instance_event(ev, args[1])
        elif kind == "remove":
            ev = ClusterEvent.removed(pool_instance(args[0]))
            snapshot = apply_cluster_event(snapshot, ev)
            pool.on_instance_event(ev)
        else:
            nodes, est = args
            on_environment_event({spec.name: pool}, EnvironmentEvent("generic-disruption", nodes),
                                 lambda _i: est)
        if check is not None:
            check(pool, snapshot, op, before)
    return pool, snapshot


# -- stub HTTP backends -------------------------------------------------------

import threading  # noqa: E402
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer  # noqa: E402


class Stub:
    """A tiny backend that answers with its own name."""

    def __init__(self, name):
        stub_name = name

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def do_GET(self):
                body = stub_name.encode()
                self.send_response(200)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                body = self.rfile.read(int(self.headers["Content-Length"]))
                self.send_response(200)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_HEAD(self):
                self.send_response(200)
                self.send_header("Content-Length", "0")
                self.end_headers()

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.daemon_threads = True
        self.port = self.httpd.server_address[1]
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    def kill(self):
        self.httpd.shutdown()
        self.httpd.server_close()


def write_registry(path, ports, service="echo"):
    path.write_text("".join(f"{service} {i} n{i} 127.0.0.1:{p}\n" for i, p in sorted(ports.items())))


# -- acceptance bookkeeping ------------------------------------------------------

from contextlib import contextmanager  # noqa: E402

CRITERIA: list[tuple[int, str, str]] = []


class Clauses:
    """Evaluates every clause of a criterion, so one failure does not hide the rest."""

    def __init__(self):
        self.failed: list[str] = []
        self.passed: list[str] = []

    def __call__(self, ok: bool, label: str) -> None:
        (self.passed if ok else self.failed).append(label)


@contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for an acceptance criterion and print a one-line verdict."""
    clauses = Clauses()
    try:
        yield clauses
    except BaseException as exc:
        clauses.failed.append(f"error: {exc!r}")
    verdict = "FAIL" if clauses.failed else "PASS"
    detail = title if not clauses.failed else f"{title}; failed: " + "; ".join(clauses.failed)
    CRITERIA.append((number, verdict, detail))
    print(f"criterion {number}: {verdict} - {detail}")
    assert not clauses.failed, detail
