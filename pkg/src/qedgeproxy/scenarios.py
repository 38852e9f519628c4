"""Static and dynamic experiments, the request loop that drives a router
through them, and the metrics they are judged by."""

from __future__ import annotations

import bisect
import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import yaml

from .emulator import (
    PROXY_NODE,
    AddLinkDelay,
    DeployInstance,
    ProcessingModel,
    RemoveInstance,
    SetOverload,
    TimelineEvent,
    Topology,
    Workload,
    WorldState,
    load_topology,
    paper_topology,
)
from .model import (
    ClusterSnapshot,
    ConfigurationError,
    InstanceId,
    NodeId,
    ServiceSpec,
)
from .pool import PoolSettings, initial_estimate
from .routing import Router, RouterKind, RoutingDecision, RoutingError, make_router

log = logging.getLogger(__name__)

SERVICE = "dps"
SLO_MS = 80.0
PHASE_LENGTH = 750


@dataclass(frozen=True)
class Scenario:
    name: str
    topology: Topology
    initial_instances: frozenset[InstanceId]
    timeline: tuple[TimelineEvent, ...]
    total_requests: int
    spec: ServiceSpec
    workload: Workload = field(default_factory=Workload)
    proxy_node: NodeId = PROXY_NODE
    processing: Mapping[InstanceId, ProcessingModel] = field(default_factory=dict)

    def __post_init__(self):
        if self.total_requests < 1:
            raise ConfigurationError("total_requests must be positive")
        last = 0
        for ev in self.timeline:
            if ev.at_request_index >= self.total_requests:
                raise ConfigurationError(
                    f"timeline event at {ev.at_request_index} is past the last request"
                )
            if ev.at_request_index < last:
                raise ConfigurationError("timeline indices must be non-decreasing")
            last = ev.at_request_index
        if self.proxy_node not in self.topology.vertices:
            raise ConfigurationError(f"proxy node {self.proxy_node!r} not in topology")
        for inst in self.initial_instances:
            if inst.node not in self.topology.vertices:
                raise ConfigurationError(f"{inst} is placed on an unknown node")

    @property
    def boundaries(self) -> list[int]:
        return sorted({ev.at_request_index for ev in self.timeline if ev.at_request_index > 0})

    def phase_of(self, index: int) -> int:
        return bisect.bisect_right(self.boundaries, index)

    @property
    def phase_count(self) -> int:
        return len(self.boundaries) + 1


def dps_instance(ordinal: int) -> InstanceId:
    """Instance ``s_i`` runs on ``worker-i``; ``s_7`` runs on the master."""
    node = "master" if ordinal == 7 else f"worker-{ordinal}"
    return InstanceId(SERVICE, ordinal, node)


def static_scenario() -> Scenario:
    return Scenario(
        name="static",
        topology=paper_topology(),
        initial_instances=frozenset(dps_instance(i) for i in range(1, 8)),
        timeline=(),
        total_requests=4000,
        spec=ServiceSpec.latency(SERVICE, SLO_MS),
    )


def dynamic_scenario() -> Scenario:
    s3 = dps_instance(3)
    timeline = (
        TimelineEvent(1 * PHASE_LENGTH, DeployInstance(s3)),
        TimelineEvent(2 * PHASE_LENGTH, SetOverload(s3, 100.0)),
        TimelineEvent(3 * PHASE_LENGTH, RemoveInstance(s3)),
        TimelineEvent(4 * PHASE_LENGTH, AddLinkDelay("worker-1", "R-near", 100.0)),
    )
    return Scenario(
        name="dynamic",
        topology=paper_topology(),
        initial_instances=frozenset(dps_instance(i) for i in (1, 2, 4, 5, 6, 7)),
        timeline=timeline,
        total_requests=5 * PHASE_LENGTH,
        spec=ServiceSpec.latency(SERVICE, SLO_MS),
    )


BUILTIN_SCENARIOS = {"static": static_scenario, "dynamic": dynamic_scenario}


def load_scenario(text: str, base_dir: Optional[Path] = None) -> Scenario:
    """Build a scenario from its YAML description (see README for the layout)."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"scenario parse error: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError("scenario must be a mapping")
    try:
        svc = data.get("service", {})
        spec = ServiceSpec.latency(svc.get("name", SERVICE), svc.get("max_response_time_ms", SLO_MS))

        topo = data.get("topology", "default")
        if topo == "default":
            topology = paper_topology()
        elif isinstance(topo, dict):
            topology = load_topology(yaml.safe_dump(topo))
        else:
            path = Path(topo)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            topology = load_topology(path.read_text(encoding="utf-8"))

        known: dict[int, InstanceId] = {}
        initial = set()
        processing = {}
        for entry in data.get("instances", []):
            inst = InstanceId(spec.name, int(entry["ordinal"]), str(entry["node"]))
            if inst.ordinal in known:
                raise ConfigurationError(f"instance ordinal {inst.ordinal} declared twice")
            known[inst.ordinal] = inst
            if entry.get("live", True):
                initial.add(inst)
            if "processing_ms" in entry:
                processing[inst] = ProcessingModel(float(entry["processing_ms"]))

        def lookup(ordinal) -> InstanceId:
            try:
                return known[int(ordinal)]
            except KeyError:
                raise ConfigurationError(f"timeline refers to undeclared instance {ordinal}") from None

        timeline = []
        for entry in data.get("timeline", []):
            at = int(entry["at"])
            if "deploy" in entry:
                action = DeployInstance(lookup(entry["deploy"]))
            elif "remove" in entry:
                action = RemoveInstance(lookup(entry["remove"]))
            elif "overload" in entry:
                action = SetOverload(lookup(entry["overload"]), float(entry["extra_ms"]))
            elif "link_delay" in entry:
                a, b = entry["link_delay"]
                action = AddLinkDelay(str(a), str(b), float(entry["delta_ms"]))
            else:
                raise ConfigurationError(f"timeline entry at {at} has no action")
            timeline.append(TimelineEvent(at, action))

        return Scenario(
            name=str(data.get("name", "custom")),
            topology=topology,
            initial_instances=frozenset(initial),
            timeline=tuple(timeline),
            total_requests=int(data["total_requests"]),
            spec=spec,
            workload=Workload.parse(str(data.get("workload", "closed-loop"))),
            proxy_node=str(data.get("proxy_node", PROXY_NODE)),
            processing=processing,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"invalid scenario: {exc!r}") from exc


def resolve_scenario(name_or_path: str) -> Scenario:
    if name_or_path in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[name_or_path]()
    path = Path(name_or_path)
    return load_scenario(path.read_text(encoding="utf-8"), path.parent)


# -- running ------------------------------------------------------------------

@dataclass(frozen=True)
class RequestRecord:
    index: int
    instance: Optional[InstanceId]
    response_time: Optional[float]
    slo_pass: bool
    phase: int = 0


def new_world(scenario: Scenario) -> WorldState:
    processing = {i: ProcessingModel() for i in scenario.initial_instances}
    processing.update(scenario.processing)
    return WorldState(
        topology=scenario.topology,
        processing=processing,
        live_instances=set(scenario.initial_instances),
        workload=scenario.workload,
    )


def run(
    scenario: Scenario,
    router: RouterKind,
    seed: int = 0,
    *,
    settings: Optional[PoolSettings] = None,
    nodeport_overhead_ms: float = 0.0,
    fallback_on_empty_pool: bool = False,
    qedge_selection: str = "cyclic",
    trace: Optional[Callable[[int, Router, RoutingDecision], None]] = None,
) -> list[RequestRecord]:
    """Replay ``scenario`` through a fresh router and emulated world.

    Timeline events scheduled at index ``k`` are applied before request ``k``
    is routed. qedge learns only from the measurements of requests it forwards;
    proximity learns only from its periodic probes. ``trace`` is invoked after
    each routing decision, before the request is simulated.
    """
    settings = settings or PoolSettings()
    world = new_world(scenario)
    proxy = scenario.proxy_node
    spec = scenario.spec

    def probe(inst: InstanceId) -> float:
        if inst not in world.live_instances:
            raise ConnectionError(f"{inst} is unreachable")
        return world.network_rtt(proxy, inst)

    def approximate(inst: InstanceId) -> float:
        return initial_estimate(world.network_rtt(proxy, inst), settings)

    engine = make_router(
        router,
        ClusterSnapshot.of(scenario.initial_instances, scenario.topology.nodes),
        {spec.name: spec},
        initial_estimate=approximate,
        probe=probe,
        seed=seed,
        settings=settings,
        fallback_on_empty_pool=fallback_on_empty_pool,
        qedge_selection=qedge_selection,
    )
    extra = nodeport_overhead_ms if router.name == "nodeport" else 0.0

    due: dict[int, list[TimelineEvent]] = {}
    for ev in scenario.timeline:
        due.setdefault(ev.at_request_index, []).append(ev)

    records = []
    for i in range(scenario.total_requests):
        for ev in due.get(i, ()):
            for note in world.apply_event(ev):
                engine.on_cluster_event(note)
        phase = scenario.phase_of(i)
        try:
            decision = engine.route(spec.name, world.clock)
        except RoutingError as exc:
            log.debug("request %d not routed: %s", i, exc)
            world.clock += 1
            records.append(RequestRecord(i, None, None, False, phase))
            continue
        if trace is not None:
            trace(i, engine, decision)
        m = world.simulate_request(proxy, decision.instance, extra)
        engine.observe(m)
        passed = m.ok and spec.requirement.passes(m.response_time)
        records.append(RequestRecord(i, decision.instance, m.response_time, passed, phase))
    return records


# -- metrics --------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    configuration: str
    total_requests: int
    routing_failures: int
    average_response_time: Optional[float]
    success_rate: float
    per_instance_counts: Mapping[InstanceId, int]
    per_phase_counts: Mapping[tuple[int, InstanceId], int]


def per_instance_distribution(records: Iterable[RequestRecord]) -> dict[InstanceId, int]:
    counts = Counter(r.instance for r in records if r.instance is not None)
    return dict(sorted(counts.items()))


def per_phase_distribution(records: Iterable[RequestRecord]) -> dict[tuple[int, InstanceId], int]:
    counts = Counter((r.phase, r.instance) for r in records if r.instance is not None)
    return dict(sorted(counts.items()))


def summarize(
    records: Sequence[RequestRecord], spec: Optional[ServiceSpec] = None, configuration: str = ""
) -> MetricsReport:
    """Aggregate a run. ``spec`` is accepted for symmetry; pass/fail is already on each record."""
    if not records:
        raise ValueError("cannot summarize an empty run")
    times = [r.response_time for r in records if r.response_time is not None]
    failures = sum(1 for r in records if r.instance is None)
    return MetricsReport(
        configuration=configuration,
        total_requests=len(records),
        routing_failures=failures,
        average_response_time=sum(times) / len(times) if times else None,
        success_rate=sum(r.slo_pass for r in records) / len(records),
        per_instance_counts=per_instance_distribution(records),
        per_phase_counts=per_phase_distribution(records),
    )


FORMATS = ("markdown", "csv")


def _instance_columns(reports: Sequence[MetricsReport]) -> list[InstanceId]:
    cols = set()
    for rep in reports:
        cols.update(rep.per_instance_counts)
    return sorted(cols)


def export_report(reports: Sequence[MetricsReport] | MetricsReport, format: str = "markdown") -> str:
    """Render reports as one table: configuration, avg_ms, success_rate, then per-instance counts."""
    if format not in FORMATS:
        raise ValueError(f"unsupported format {format!r}; choose from {FORMATS}")
    if isinstance(reports, MetricsReport):
        reports = [reports]
    cols = _instance_columns(reports)
    header = ["configuration", "avg_ms", "success_rate"] + [c.label for c in cols]

    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for rep in reports:
            avg = "" if rep.average_response_time is None else repr(rep.average_response_time)
            counts = [rep.per_instance_counts.get(c, 0) for c in cols]
            writer.writerow([rep.configuration, avg, repr(rep.success_rate)] + counts)
        return buf.getvalue()

    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for rep in reports:
        avg = "n/a" if rep.average_response_time is None else f"{rep.average_response_time:.2f}"
        cells = [rep.configuration, avg, f"{100 * rep.success_rate:.2f}%"]
        cells += [str(rep.per_instance_counts.get(c, 0)) for c in cols]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def export_phases(report: MetricsReport) -> str:
    """Tidy CSV of per-phase counts: ``phase,instance,count``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["phase", "instance", "count"])
    for (phase, inst), n in sorted(report.per_phase_counts.items()):
        writer.writerow([phase, inst.label, n])
    return buf.getvalue()


RECORD_FIELDS = ["index", "phase", "instance", "node", "response_time_ms", "slo_pass"]


def write_records(records: Iterable[RequestRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_FIELDS)
    for r in records:
        writer.writerow(
            [
                r.index,
                r.phase,
                "" if r.instance is None else f"{r.instance.service}/{r.instance.ordinal}",
                "" if r.instance is None else r.instance.node,
                "" if r.response_time is None else repr(r.response_time),
                int(r.slo_pass),
            ]
        )
    return buf.getvalue()


def read_records(text: str) -> list[RequestRecord]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        inst = None
        if row["instance"]:
            service, ordinal = row["instance"].rsplit("/", 1)
            inst = InstanceId(service, int(ordinal), row["node"])
        rt = float(row["response_time_ms"]) if row["response_time_ms"] else None
        out.append(RequestRecord(int(row["index"]), inst, rt, row["slo_pass"] == "1", int(row["phase"])))
    return out


COMPARISON = (
    RouterKind.nodeport(),
    RouterKind.proximity(0.8),
    RouterKind.proximity(1.0),
    RouterKind.qedge(),
)


def compare(scenario: Scenario, seed: int = 0, **run_kwargs) -> list[MetricsReport]:
    """Run every router in :data:`COMPARISON` over the identical scenario."""
    return [
        summarize(run(scenario, kind, seed, **run_kwargs), scenario.spec, kind.label)
        for kind in COMPARISON
    ]
