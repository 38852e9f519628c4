"""Request routing policies.

Three policies share one interface (:class:`Router`):

* ``qedge`` rotates requests over the service's QoS pool with equal weights
  and learns from the response time of every request it forwards.
* ``nodeport`` is a QoS-blind round robin over every live instance.
* ``proximity`` blends uniform load balancing with always-closest routing,
  using a latency table refreshed by active probes every ``refresh_period``
  requests and nothing else.
"""

from __future__ import annotations

import logging
import math
import random
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

from .model import (
    ClusterEvent,
    ClusterEventKind,
    ClusterSnapshot,
    ConfigurationError,
    InstanceId,
    Measurement,
    ServiceName,
    ServiceSpec,
    Tick,
    apply_cluster_event,
)
from .pool import PoolSettings, QoSPool

log = logging.getLogger(__name__)


class RoutingError(RuntimeError):
    pass


class NoInstanceError(RoutingError):
    """The service has no live instance at all."""


class NoEligibleInstanceError(RoutingError):
    """The QoS pool is empty: no instance is predicted to meet the SLO."""


class UnknownServiceError(RoutingError, KeyError):
    pass


@dataclass(frozen=True)
class RouterKind:
    name: str
    alpha: Optional[float] = None
    refresh_period: int = 100

    def __post_init__(self):
        if self.name not in ("qedge", "nodeport", "proximity"):
            raise ConfigurationError(f"unknown router {self.name!r}")
        if self.name == "proximity":
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ConfigurationError(f"proximity alpha must be in [0, 1], got {self.alpha}")
            if self.refresh_period < 1:
                raise ConfigurationError("refresh_period must be >= 1")
        elif self.alpha is not None:
            raise ConfigurationError("alpha only applies to the proximity router")

    @classmethod
    def qedge(cls) -> "RouterKind":
        return cls("qedge")

    @classmethod
    def nodeport(cls) -> "RouterKind":
        return cls("nodeport")

    @classmethod
    def proximity(cls, alpha: float, refresh_period: int = 100) -> "RouterKind":
        return cls("proximity", float(alpha), refresh_period)

    @property
    def label(self) -> str:
        if self.name == "qedge":
            return "QEdgeProxy"
        if self.name == "nodeport":
            return "NodePort"
        return f"proxy-mity {self.alpha:.1f}"


@dataclass
class LatencyTable:
    rtts: dict[InstanceId, float] = field(default_factory=dict)
    probed_at: Tick = -1

    def rtt(self, instance: InstanceId) -> float:
        return self.rtts.get(instance, math.inf)


@dataclass(frozen=True)
class RoutingDecision:
    instance: InstanceId
    decided_at: Tick
    policy: RouterKind


# -- selection rules -------------------------------------------------------

def qedge_select(pool: QoSPool) -> InstanceId:
    if not pool.members:
        raise NoEligibleInstanceError(f"QoS pool for {pool.name!r} is empty")
    cursor = pool.rr_cursor % len(pool.members)
    chosen = pool.members[cursor]
    pool.rr_cursor = (cursor + 1) % len(pool.members)
    return chosen


def qedge_random_select(pool: QoSPool, rng: random.Random) -> InstanceId:
    """Equal-weight random pick; the cursor is left alone."""
    if not pool.members:
        raise NoEligibleInstanceError(f"QoS pool for {pool.name!r} is empty")
    return rng.choice(pool.members)


QEDGE_SELECTIONS = ("cyclic", "random")


def nodeport_select(instances: Sequence[InstanceId], cursor: int) -> tuple[InstanceId, int]:
    """Round robin in ordinal order. Returns the choice and the advanced cursor."""
    if not instances:
        raise NoInstanceError("no live instances")
    ordered = sorted(instances)
    idx = cursor % len(ordered)
    return ordered[idx], idx + 1


def proximity_weights(
    instances: Sequence[InstanceId], table: LatencyTable, alpha: float
) -> list[float]:
    n = len(instances)
    closest = min(instances, key=lambda i: (table.rtt(i), i.ordinal))
    return [(1.0 - alpha) / n + (alpha if i == closest else 0.0) for i in instances]


def proximity_select(
    instances: Sequence[InstanceId], table: LatencyTable, alpha: float, rng: random.Random
) -> InstanceId:
    """Sample ``(1-alpha)/N`` uniformly plus ``alpha`` on the lowest-RTT instance."""
    if not instances:
        raise NoInstanceError("no live instances")
    ordered = sorted(instances)
    weights = proximity_weights(ordered, table, alpha)
    u = rng.random()
    acc = 0.0
    for inst, w in zip(ordered, weights):
        acc += w
        if u < acc:
            return inst
    # float round-off at the top of the unit interval
    return next(i for i, w in zip(reversed(ordered), reversed(weights)) if w > 0)


def refresh_latencies(
    table: LatencyTable,
    probe: Callable[[InstanceId], float],
    instances: Sequence[InstanceId],
    now: Tick,
) -> LatencyTable:
    rtts = {}
    for inst in instances:
        try:
            rtts[inst] = float(probe(inst))
        except Exception as exc:  # probe failure: never the closest
            log.debug("probe of %s failed: %s", inst, exc)
            rtts[inst] = math.inf
    return LatencyTable(rtts, now)


# -- stateful routers --------------------------------------------------------

class Router(ABC):
    """A routing policy bound to a proxy's view of the cluster."""

    kind: RouterKind

    def __init__(self, snapshot: ClusterSnapshot):
        self.snapshot = snapshot

    def on_cluster_event(self, ev: ClusterEvent) -> None:
        self.snapshot = apply_cluster_event(self.snapshot, ev)

    def live(self, service: ServiceName) -> list[InstanceId]:
        return self.snapshot.instances(service)

    @abstractmethod
    def route(self, service: ServiceName, now: Tick) -> RoutingDecision:
        ...

    def observe(self, m: Measurement) -> None:
        """Feedback for the forwarded request. Ignored unless the policy learns from it."""


class NodePortRouter(Router):
    kind = RouterKind.nodeport()

    def __init__(self, snapshot: ClusterSnapshot):
        super().__init__(snapshot)
        self.cursors: dict[ServiceName, int] = {}

    def route(self, service, now):
        inst, cursor = nodeport_select(self.live(service), self.cursors.get(service, 0))
        self.cursors[service] = cursor
        return RoutingDecision(inst, now, self.kind)


class ProximityRouter(Router):
    def __init__(
        self,
        snapshot: ClusterSnapshot,
        kind: RouterKind,
        probe: Callable[[InstanceId], float],
        seed: int = 0,
    ):
        super().__init__(snapshot)
        if kind.name != "proximity":
            raise ConfigurationError("ProximityRouter needs a proximity RouterKind")
        self.kind = kind
        self.probe = probe
        self.rng = random.Random(seed)
        self.tables: dict[ServiceName, LatencyTable] = {}
        self.requests: dict[ServiceName, int] = {}

    def route(self, service, now):
        instances = self.live(service)
        if not instances:
            raise NoInstanceError(f"no live instances of {service!r}")
        count = self.requests.get(service, 0)
        if count % self.kind.refresh_period == 0:
            self.tables[service] = refresh_latencies(
                self.tables.get(service, LatencyTable()), self.probe, instances, now
            )
        self.requests[service] = count + 1
        inst = proximity_select(instances, self.tables[service], self.kind.alpha, self.rng)
        return RoutingDecision(inst, now, self.kind)


class QEdgeRouter(Router):
    """QoS-pool router.

    ``initial_estimate`` supplies the latency approximation for an instance the
    first time it is seen. With ``fallback_on_empty_pool`` an empty pool routes
    to the instance with the best current estimate instead of raising.
    ``selection`` is ``"cyclic"`` (round robin) or ``"random"`` (seeded uniform).
    """

    kind = RouterKind.qedge()

    def __init__(
        self,
        snapshot: ClusterSnapshot,
        specs: Mapping[ServiceName, ServiceSpec],
        initial_estimate: Callable[[InstanceId], float],
        settings: Optional[PoolSettings] = None,
        fallback_on_empty_pool: bool = False,
        probe: Optional[Callable[[InstanceId], float]] = None,
        selection: str = "cyclic",
        seed: int = 0,
    ):
        super().__init__(snapshot)
        if selection not in QEDGE_SELECTIONS:
            raise ConfigurationError(f"unknown qedge selection {selection!r}")
        self.selection = selection
        self.rng = random.Random(seed)
        self.specs = dict(specs)
        self.initial_estimate = initial_estimate
        self.settings = settings or PoolSettings()
        self.fallback = fallback_on_empty_pool
        self.probe = probe
        self.pools: dict[ServiceName, QoSPool] = {}
        self._since_probe: dict[ServiceName, int] = {}
        if self.settings.probe_every is not None and probe is None:
            raise ConfigurationError("probe_every is set but no probe function was given")

    def pool(self, service: ServiceName, now: Tick = 0) -> QoSPool:
        """The service's pool, created from initial estimates on first use."""
        pool = self.pools.get(service)
        if pool is None:
            spec = self.specs.get(service)
            if spec is None:
                raise UnknownServiceError(service)
            estimates = {i: self.initial_estimate(i) for i in self.live(service)}
            pool = QoSPool.create(spec, self.snapshot, estimates, now, self.settings)
            self.pools[service] = pool
        return pool

    def on_cluster_event(self, ev: ClusterEvent) -> None:
        super().on_cluster_event(ev)
        pool = self.pools.get(ev.instance.service)
        if pool is None:
            return
        est = self.initial_estimate(ev.instance) if ev.kind is ClusterEventKind.ADDED else 0.0
        pool.on_instance_event(ev, est)

    def _maybe_probe(self, pool: QoSPool, now: Tick) -> None:
        every = self.settings.probe_every
        if every is None:
            return
        n = self._since_probe.get(pool.name, 0) + 1
        if n >= every:
            n = 0
            for inst in pool.instances():
                if inst not in pool.members:
                    pool.reestimate(inst, self.probe(inst) + self.settings.prior_processing_ms, now)
        self._since_probe[pool.name] = n

    def route(self, service, now):
        pool = self.pool(service, now)
        self._maybe_probe(pool, now)
        try:
            if self.selection == "cyclic":
                inst = qedge_select(pool)
            else:
                inst = qedge_random_select(pool, self.rng)
        except NoEligibleInstanceError:
            best = pool.best_estimate() if self.fallback else None
            if best is None:
                raise
            inst = best
        return RoutingDecision(inst, now, self.kind)

    def observe(self, m: Measurement) -> None:
        pool = self.pools.get(m.instance.service)
        if pool is not None and m.instance in pool.histories:
            pool.record_measurement(m)


def make_router(
    kind: RouterKind,
    snapshot: ClusterSnapshot,
    specs: Mapping[ServiceName, ServiceSpec],
    *,
    initial_estimate: Callable[[InstanceId], float],
    probe: Callable[[InstanceId], float],
    seed: int = 0,
    settings: Optional[PoolSettings] = None,
    fallback_on_empty_pool: bool = False,
    qedge_selection: str = "cyclic",
) -> Router:
    if kind.name == "qedge":
        return QEdgeRouter(
            snapshot, specs, initial_estimate, settings, fallback_on_empty_pool,
            probe=probe, selection=qedge_selection, seed=seed,
        )
    if kind.name == "nodeport":
        return NodePortRouter(snapshot)
    return ProximityRouter(snapshot, kind, probe, seed)
