"""QoS-aware request routing for services spread over an edge-to-cloud continuum."""

from .model import (
    ClusterEvent,
    ClusterSnapshot,
    InstanceId,
    Measurement,
    QoSRequirement,
    ServiceSpec,
    apply_cluster_event,
    meets_requirement,
)
from .pool import EnvironmentEvent, PoolSettings, QoSPool, eligible_instances, on_environment_event
from .routing import RouterKind, make_router
from .scenarios import compare, dynamic_scenario, run, static_scenario, summarize

__version__ = "0.1.0"

__all__ = [
    "ClusterEvent",
    "ClusterSnapshot",
    "EnvironmentEvent",
    "InstanceId",
    "Measurement",
    "PoolSettings",
    "QoSPool",
    "QoSRequirement",
    "RouterKind",
    "ServiceSpec",
    "apply_cluster_event",
    "compare",
    "dynamic_scenario",
    "eligible_instances",
    "make_router",
    "meets_requirement",
    "on_environment_event",
    "run",
    "static_scenario",
    "summarize",
]
