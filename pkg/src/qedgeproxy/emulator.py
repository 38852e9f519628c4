"""Deterministic in-process stand-in for an emulated edge-to-cloud testbed.

The network is a tree of nodes, routers and client devices joined by links
with symmetric one-way delays. A request's response time is the round trip
between the proxy's node and the instance's node plus the instance's
processing time. There is no queueing, so response times do not depend on load.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import yaml

from .model import (
    ClusterEvent,
    ConfigurationError,
    InstanceId,
    Measurement,
    NodeId,
    Tick,
)

log = logging.getLogger(__name__)

VERTEX_KINDS = ("node", "router", "device")


class TopologyError(ConfigurationError):
    """Topology description failed to parse or validate.

    ``problems`` lists every diagnostic found, each prefixed with its line
    number when one is known.
    """

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True, order=True)
class Link:
    a: str
    b: str
    one_way_delay: float = 0.0

    def __post_init__(self):
        # canonical endpoint order so equal links compare equal
        if self.b < self.a:
            a, b = self.b, self.a
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)

    @property
    def key(self) -> frozenset[str]:
        return frozenset((self.a, self.b))


@dataclass(frozen=True)
class Topology:
    vertices: dict[str, str]
    links: tuple[Link, ...]

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(sorted(self.links)))
        problems = _validate(self.vertices, self.links)
        if problems:
            raise TopologyError(problems)
        adj: dict[str, list[tuple[str, float]]] = {v: [] for v in self.vertices}
        for link in self.links:
            adj[link.a].append((link.b, link.one_way_delay))
            adj[link.b].append((link.a, link.one_way_delay))
        object.__setattr__(self, "_adj", adj)
        object.__setattr__(self, "_dist_cache", {})

    def __eq__(self, other):
        if not isinstance(other, Topology):
            return NotImplemented
        return self.vertices == other.vertices and self.links == other.links

    def __hash__(self):
        return hash((tuple(sorted(self.vertices.items())), self.links))

    @property
    def nodes(self) -> list[NodeId]:
        return sorted(v for v, k in self.vertices.items() if k == "node")

    def link(self, a: str, b: str) -> Link:
        key = frozenset((a, b))
        for link in self.links:
            if link.key == key:
                return link
        raise KeyError(f"no link between {a!r} and {b!r}")

    def with_link_delay(self, a: str, b: str, delta: float) -> "Topology":
        old = self.link(a, b)
        new = Link(old.a, old.b, old.one_way_delay + delta)
        links = tuple(new if l.key == old.key else l for l in self.links)
        return Topology(dict(self.vertices), links)

    def _distances_from(self, src: str) -> dict[str, float]:
        cache = self._dist_cache
        if src not in cache:
            dist = {src: 0.0}
            queue = deque([src])
            while queue:
                v = queue.popleft()
                for w, d in self._adj[v]:
                    if w not in dist:
                        dist[w] = dist[v] + d
                        queue.append(w)
            cache[src] = dist
        return cache[src]

    def one_way_latency(self, a: str, b: str) -> float:
        for v in (a, b):
            if v not in self.vertices:
                raise KeyError(f"{v!r} is not attached to the topology")
        return self._distances_from(a)[b]

    def rtt(self, a: str, b: str) -> float:
        return 2.0 * self.one_way_latency(a, b)


def one_way_latency(t: Topology, a: str, b: str) -> float:
    return t.one_way_latency(a, b)


def _validate(vertices: dict[str, str], links: Iterable[Link]) -> list[str]:
    problems = []
    for v, kind in vertices.items():
        if not v:
            problems.append("empty vertex name")
        if kind not in VERTEX_KINDS:
            problems.append(f"vertex {v!r}: unknown kind {kind!r}")
    seen: set[frozenset[str]] = set()
    adj: dict[str, set[str]] = {v: set() for v in vertices}
    for link in links:
        for end in (link.a, link.b):
            if end not in vertices:
                problems.append(f"link {link.a}-{link.b}: unknown vertex {end!r}")
        if link.a == link.b:
            problems.append(f"link {link.a}-{link.b}: self loop")
        if not (link.one_way_delay >= 0) or math.isinf(link.one_way_delay):
            problems.append(f"link {link.a}-{link.b}: negative or invalid delay {link.one_way_delay}")
        if link.key in seen:
            problems.append(f"link {link.a}-{link.b}: duplicate link")
        seen.add(link.key)
        if link.a in adj and link.b in adj:
            adj[link.a].add(link.b)
            adj[link.b].add(link.a)
    if problems or not vertices:
        return problems or ["topology has no vertices"]
    start = next(iter(sorted(vertices)))
    reached = {start}
    stack = [start]
    while stack:
        for w in adj[stack.pop()]:
            if w not in reached:
                reached.add(w)
                stack.append(w)
    for v in sorted(set(vertices) - reached):
        problems.append(f"vertex {v!r} is disconnected")
    if not problems and len(seen) != len(vertices) - 1:
        problems.append("topology is not a tree: paths between vertices are not unique")
    return problems


# -- config text ------------------------------------------------------------

def _line_of(node) -> str:
    mark = getattr(node, "start_mark", None)
    return f"line {mark.line + 1}: " if mark is not None else ""


def load_topology(config_text: str) -> Topology:
    """Parse a YAML topology description.

    Expected shape::

        vertices:
          node: [worker-1, ...]
          router: [R-near, ...]
          device: [device]
        links:
          - [device, R-farA, 0]
          - [R-farA, R-near, 20]
    """
    try:
        root = yaml.compose(config_text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise TopologyError([f"parse error: {exc}"]) from exc
    if root is None or not isinstance(root, yaml.MappingNode):
        raise TopologyError(["topology must be a mapping with 'vertices' and 'links'"])
    data = yaml.safe_load(config_text)
    sections = {k.value: v for k, v in root.value}

    problems = []
    vertices: dict[str, str] = {}
    raw_vertices = data.get("vertices")
    if not isinstance(raw_vertices, dict):
        raise TopologyError([f"{_line_of(root)}missing 'vertices' mapping"])
    for kind, names in raw_vertices.items():
        if kind not in VERTEX_KINDS:
            problems.append(f"{_line_of(sections['vertices'])}unknown vertex kind {kind!r}")
            continue
        for name in names or ():
            name = str(name)
            if name in vertices:
                problems.append(f"{_line_of(sections['vertices'])}vertex {name!r} declared twice")
            vertices[name] = kind

    raw_links = data.get("links") or []
    link_nodes = sections["links"].value if "links" in sections else []
    links = []
    seen: set[frozenset[str]] = set()
    for raw, node in zip(raw_links, link_nodes):
        where = _line_of(node)
        if isinstance(raw, dict):
            raw = [raw.get("a"), raw.get("b"), raw.get("delay_ms", 0)]
        if not isinstance(raw, list) or len(raw) != 3:
            problems.append(f"{where}link must be [a, b, delay_ms]")
            continue
        a, b, delay = str(raw[0]), str(raw[1]), raw[2]
        if not isinstance(delay, (int, float)) or isinstance(delay, bool):
            problems.append(f"{where}link {a}-{b}: delay must be a number")
            continue
        if delay < 0:
            problems.append(f"{where}link {a}-{b}: negative delay {delay}")
        for end in (a, b):
            if end not in vertices:
                problems.append(f"{where}link {a}-{b}: unknown vertex {end!r}")
        key = frozenset((a, b))
        if key in seen:
            problems.append(f"{where}link {a}-{b}: duplicate link")
        seen.add(key)
        links.append(Link(a, b, float(delay)))
    if problems:
        raise TopologyError(problems)
    return Topology(vertices, tuple(links))


def _fmt_delay(d: float):
    return int(d) if float(d).is_integer() else d


def _name(v: str) -> str:
    # quote names YAML would otherwise read as numbers, booleans or syntax
    try:
        plain = yaml.safe_load(f"[{v}]") == [v]
    except yaml.YAMLError:
        plain = False
    return v if plain else '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_topology(t: Topology) -> str:
    by_kind: dict[str, list[str]] = {k: [] for k in VERTEX_KINDS}
    for v, kind in sorted(t.vertices.items()):
        by_kind[kind].append(_name(v))
    lines = ["# one-way link delays in milliseconds; the graph must be a tree", "vertices:"]
    for kind in VERTEX_KINDS:
        if by_kind[kind]:
            lines.append(f"  {kind}: [{', '.join(by_kind[kind])}]")
    lines.append("links:")
    for link in t.links:
        lines.append(f"  - [{_name(link.a)}, {_name(link.b)}, {_fmt_delay(link.one_way_delay)}]")
    return "\n".join(lines) + "\n"


DEVICE = "device"
PROXY_NODE = "worker-3"


def paper_topology() -> Topology:
    """Default continuum: two far-edge LANs, a near-edge router and the cloud.

    The client device shares far-edge LAN A with worker-3 and worker-4.
    """
    vertices = {DEVICE: "device", "master": "node"}
    for i in range(1, 7):
        vertices[f"worker-{i}"] = "node"
    for r in ("R-farA", "R-farB", "R-near", "R-cloud"):
        vertices[r] = "router"
    links = (
        Link(DEVICE, "R-farA", 0),
        Link("worker-3", "R-farA", 0),
        Link("worker-4", "R-farA", 0),
        Link("worker-5", "R-farB", 0),
        Link("worker-6", "R-farB", 0),
        Link("worker-1", "R-near", 0),
        Link("worker-2", "R-near", 20),
        Link("master", "R-cloud", 0),
        Link("R-farA", "R-near", 20),
        Link("R-farB", "R-near", 20),
        Link("R-near", "R-cloud", 50),
    )
    return Topology(vertices, links)


# -- world state ------------------------------------------------------------

@dataclass(frozen=True)
class ProcessingModel:
    base_processing: float = 2.0
    overload_extra: float = 0.0

    def __post_init__(self):
        if self.base_processing < 0 or self.overload_extra < 0:
            raise ConfigurationError("processing times must be non-negative")

    @property
    def total(self) -> float:
        return self.base_processing + self.overload_extra


@dataclass(frozen=True)
class DeployInstance:
    instance: InstanceId


@dataclass(frozen=True)
class RemoveInstance:
    instance: InstanceId


@dataclass(frozen=True)
class SetOverload:
    instance: InstanceId
    extra_ms: float


@dataclass(frozen=True)
class AddLinkDelay:
    a: str
    b: str
    delta_ms: float


Action = Union[DeployInstance, RemoveInstance, SetOverload, AddLinkDelay]


@dataclass(frozen=True)
class TimelineEvent:
    at_request_index: int
    action: Action

    def __post_init__(self):
        if self.at_request_index < 0:
            raise ConfigurationError("timeline index must be non-negative")


@dataclass(frozen=True)
class Workload:
    """Closed loop (``interval_ms is None``) or fixed-interval open loop."""

    interval_ms: Optional[int] = None

    @property
    def closed_loop(self) -> bool:
        return self.interval_ms is None

    def __str__(self) -> str:
        return "closed-loop" if self.closed_loop else f"fixed-interval:{self.interval_ms}"

    @classmethod
    def parse(cls, text: str) -> "Workload":
        text = text.strip()
        if text == "closed-loop":
            return cls()
        if text.startswith("fixed-interval:"):
            ms = int(text.split(":", 1)[1])
            if ms <= 0:
                raise ConfigurationError("fixed-interval must be positive")
            return cls(ms)
        raise ConfigurationError(f"unknown workload {text!r}")


# transport errors cost a client-side timeout before the next request
TRANSPORT_ERROR_TICKS = 1


@dataclass
class WorldState:
    topology: Topology
    processing: dict[InstanceId, ProcessingModel] = field(default_factory=dict)
    live_instances: set[InstanceId] = field(default_factory=set)
    clock: Tick = 0
    workload: Workload = field(default_factory=Workload)

    def response_time(self, proxy_node: NodeId, target: InstanceId) -> float:
        proc = self.processing.get(target, ProcessingModel())
        return self.topology.rtt(proxy_node, target.node) + proc.total

    def network_rtt(self, proxy_node: NodeId, target: InstanceId) -> float:
        return self.topology.rtt(proxy_node, target.node)

    def _advance(self, elapsed: float) -> None:
        if self.workload.closed_loop:
            self.clock += max(1, math.ceil(elapsed))
        else:
            self.clock += self.workload.interval_ms

    def simulate_request(
        self, proxy_node: NodeId, target: InstanceId, extra_ms: float = 0.0
    ) -> Measurement:
        at = self.clock
        if target not in self.live_instances:
            self._advance(TRANSPORT_ERROR_TICKS)
            return Measurement.transport_error(target, at)
        rt = self.response_time(proxy_node, target) + extra_ms
        self._advance(rt)
        return Measurement(target, rt, at)

    def apply_event(self, ev: TimelineEvent) -> list[ClusterEvent]:
        """Mutate the world; only instance lifecycle changes are announced."""
        act = ev.action
        if isinstance(act, DeployInstance):
            if act.instance in self.live_instances:
                raise ConfigurationError(f"{act.instance} is already live")
            if act.instance.node not in self.topology.vertices:
                raise ConfigurationError(f"{act.instance} targets unknown node")
            self.live_instances.add(act.instance)
            self.processing.setdefault(act.instance, ProcessingModel())
            return [ClusterEvent.added(act.instance, self.clock)]
        if isinstance(act, RemoveInstance):
            if act.instance not in self.live_instances:
                raise ConfigurationError(f"cannot remove {act.instance}: not live")
            self.live_instances.discard(act.instance)
            return [ClusterEvent.removed(act.instance, self.clock)]
        if isinstance(act, SetOverload):
            model = self.processing.get(act.instance, ProcessingModel())
            self.processing[act.instance] = ProcessingModel(model.base_processing, act.extra_ms)
            return []
        if isinstance(act, AddLinkDelay):
            self.topology = self.topology.with_link_delay(act.a, act.b, act.delta_ms)
            return []
        raise TypeError(f"unsupported timeline action {act!r}")
