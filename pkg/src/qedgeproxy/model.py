"""Shared vocabulary: identifiers, service requirements, measurements and cluster events."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

log = logging.getLogger(__name__)

NodeId = str
ServiceName = str
Tick = int


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration supplied by the caller."""


@dataclass(frozen=True, order=True)
class InstanceId:
    service: ServiceName
    ordinal: int
    node: NodeId = field(compare=False)

    def __post_init__(self):
        if not self.service:
            raise ConfigurationError("service name must be non-empty")
        if self.ordinal < 1:
            raise ConfigurationError(f"instance ordinal must be positive, got {self.ordinal}")
        if not self.node:
            raise ConfigurationError("node id must be non-empty")

    @property
    def label(self) -> str:
        return f"s{self.ordinal}"

    def __str__(self) -> str:
        return f"{self.service}/{self.label}@{self.node}"


@dataclass(frozen=True)
class QoSRequirement:
    """Latency SLO: a response passes when it is strictly below ``max_response_time`` ms."""

    max_response_time: float

    def __post_init__(self):
        if not (self.max_response_time > 0) or math.isinf(self.max_response_time):
            raise ConfigurationError(
                f"max_response_time must be positive and finite, got {self.max_response_time}"
            )

    def passes(self, response_time: float) -> bool:
        return response_time < self.max_response_time


def meets_requirement(response_time: float, req: QoSRequirement) -> bool:
    if response_time < 0:
        raise ValueError(f"response time cannot be negative: {response_time}")
    return req.passes(response_time)


@dataclass(frozen=True)
class ServiceSpec:
    name: ServiceName
    requirement: QoSRequirement

    def __post_init__(self):
        if not self.name:
            raise ConfigurationError("service name must be non-empty")

    @classmethod
    def latency(cls, name: ServiceName, max_response_time_ms: float) -> "ServiceSpec":
        return cls(name, QoSRequirement(float(max_response_time_ms)))


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    TRANSPORT_ERROR = "transport-error"


@dataclass(frozen=True)
class Measurement:
    instance: InstanceId
    response_time: Optional[float]
    at: Tick
    outcome: Outcome = Outcome.SUCCESS

    def __post_init__(self):
        if self.outcome is Outcome.SUCCESS:
            if self.response_time is None or not math.isfinite(self.response_time):
                raise ValueError("a successful measurement needs a finite response time")
            if self.response_time < 0:
                raise ValueError("response time cannot be negative")

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.SUCCESS

    @classmethod
    def transport_error(cls, instance: InstanceId, at: Tick) -> "Measurement":
        return cls(instance, None, at, Outcome.TRANSPORT_ERROR)


class ClusterEventKind(str, enum.Enum):
    ADDED = "instance-added"
    REMOVED = "instance-removed"


@dataclass(frozen=True)
class ClusterEvent:
    kind: ClusterEventKind
    instance: InstanceId
    at: Tick = 0

    @classmethod
    def added(cls, instance: InstanceId, at: Tick = 0) -> "ClusterEvent":
        return cls(ClusterEventKind.ADDED, instance, at)

    @classmethod
    def removed(cls, instance: InstanceId, at: Tick = 0) -> "ClusterEvent":
        return cls(ClusterEventKind.REMOVED, instance, at)


@dataclass(frozen=True)
class ClusterSnapshot:
    """The proxy's view of which service instances exist and on which nodes."""

    services: Mapping[ServiceName, frozenset[InstanceId]] = field(default_factory=dict)
    nodes: frozenset[NodeId] = frozenset()

    def __post_init__(self):
        for instances in self.services.values():
            for inst in instances:
                if inst.node not in self.nodes:
                    raise ConfigurationError(f"{inst} is on unknown node {inst.node!r}")

    @classmethod
    def of(cls, instances, nodes=()) -> "ClusterSnapshot":
        services: dict[ServiceName, set[InstanceId]] = {}
        for inst in instances:
            services.setdefault(inst.service, set()).add(inst)
        all_nodes = set(nodes) | {i.node for s in services.values() for i in s}
        return cls({k: frozenset(v) for k, v in services.items()}, frozenset(all_nodes))

    def instances(self, service: ServiceName) -> list[InstanceId]:
        """Instances of ``service`` in ordinal order."""
        return sorted(self.services.get(service, ()))

    def __contains__(self, instance: object) -> bool:
        return isinstance(instance, InstanceId) and instance in self.services.get(instance.service, ())

    def __len__(self) -> int:
        return sum(len(v) for v in self.services.values())


def apply_cluster_event(snapshot: ClusterSnapshot, ev: ClusterEvent) -> ClusterSnapshot:
    inst = ev.instance
    current = snapshot.services.get(inst.service, frozenset())
    services = dict(snapshot.services)
    if ev.kind is ClusterEventKind.ADDED:
        if inst in current:
            return snapshot
        services[inst.service] = current | {inst}
        return ClusterSnapshot(services, snapshot.nodes | {inst.node})
    if inst not in current:
        log.warning("ignoring removal of unknown instance %s", inst)
        return snapshot
    services[inst.service] = current - {inst}
    return ClusterSnapshot(services, snapshot.nodes)
