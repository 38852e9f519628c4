"""Per-service QoS pools.

A pool holds every known instance of one service together with a latency
estimate for each, and the subset (``members``) currently predicted to meet the
service's SLO. Four kinds of input keep it current: pool creation from initial
approximations, instance add/remove events from the orchestrator, per-request
measurements, and environment events that force re-estimation.

Estimates are an exponentially weighted moving average of measured response
times. Membership also tracks consecutive SLO violations so a member is dropped
on the first bad sample (``violation_limit=1``) even if its average still passes.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional

from .model import (
    ClusterEvent,
    ClusterEventKind,
    ClusterSnapshot,
    ConfigurationError,
    InstanceId,
    Measurement,
    NodeId,
    ServiceName,
    ServiceSpec,
    Tick,
)

log = logging.getLogger(__name__)


class UnknownInstanceError(KeyError):
    """A measurement or update referenced an instance the pool does not track."""


class EstimateSource(str, enum.Enum):
    INITIAL = "initial-approximation"
    MEASURED = "measured"


@dataclass(frozen=True)
class PoolSettings:
    """Estimator knobs. ``violation_limit=None`` disables violation-based ejection."""

    beta: float = 0.3
    violation_limit: Optional[int] = 1
    prior_processing_ms: float = 2.0
    probe_every: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ConfigurationError(f"beta must be in (0, 1], got {self.beta}")
        if self.violation_limit is not None and self.violation_limit < 1:
            raise ConfigurationError("violation_limit must be >= 1 or None")
        if self.probe_every is not None and self.probe_every < 1:
            raise ConfigurationError("probe_every must be >= 1 or None")


@dataclass(frozen=True)
class QoSEstimate:
    predicted_response_time: float
    sample_count: int = 0
    last_updated: Tick = 0
    source: EstimateSource = EstimateSource.INITIAL


@dataclass
class InstanceHistory:
    instance: InstanceId
    estimate: QoSEstimate
    consecutive_violations: int = 0


def _order_key(instance: InstanceId, estimate: float):
    return (estimate, instance.ordinal)


def eligible_instances(
    spec: ServiceSpec, snapshot: ClusterSnapshot, estimates: Mapping[InstanceId, float]
) -> list[InstanceId]:
    """Reference membership: instances whose estimate passes, ascending by estimate."""
    req = spec.requirement
    passing = [i for i in snapshot.instances(spec.name) if req.passes(estimates[i])]
    return sorted(passing, key=lambda i: _order_key(i, estimates[i]))


@dataclass
class QoSPool:
    service: ServiceSpec
    members: list[InstanceId] = field(default_factory=list)
    histories: dict[InstanceId, InstanceHistory] = field(default_factory=dict)
    rr_cursor: int = 0
    settings: PoolSettings = field(default_factory=PoolSettings)

    @classmethod
    def create(
        cls,
        spec: ServiceSpec,
        snapshot: ClusterSnapshot,
        initial_estimates: Mapping[InstanceId, float],
        now: Tick = 0,
        settings: Optional[PoolSettings] = None,
    ) -> "QoSPool":
        pool = cls(spec, settings=settings or PoolSettings())
        for inst in snapshot.instances(spec.name):
            if inst not in initial_estimates:
                raise ConfigurationError(f"no initial estimate for {inst}")
            est = float(initial_estimates[inst])
            pool.histories[inst] = InstanceHistory(inst, QoSEstimate(est, 0, now))
            pool._reevaluate(inst)
        return pool

    # -- views -----------------------------------------------------------

    @property
    def name(self) -> ServiceName:
        return self.service.name

    def estimate(self, instance: InstanceId) -> float:
        return self.histories[instance].estimate.predicted_response_time

    def estimates(self) -> dict[InstanceId, float]:
        return {i: h.estimate.predicted_response_time for i, h in self.histories.items()}

    def instances(self) -> list[InstanceId]:
        return sorted(self.histories)

    def snapshot(self) -> ClusterSnapshot:
        return ClusterSnapshot.of(self.histories)

    def best_estimate(self) -> Optional[InstanceId]:
        if not self.histories:
            return None
        return min(self.histories, key=lambda i: _order_key(i, self.estimate(i)))

    # -- membership bookkeeping -------------------------------------------

    def _admit(self, instance: InstanceId) -> None:
        if instance in self.members:
            return
        key = _order_key(instance, self.estimate(instance))
        pos = len(self.members)
        for idx, m in enumerate(self.members):
            if key < _order_key(m, self.estimate(m)):
                pos = idx
                break
        self.members.insert(pos, instance)
        # keep the next-to-serve member the same
        if pos < self.rr_cursor:
            self.rr_cursor += 1

    def _eject(self, instance: InstanceId) -> None:
        if instance not in self.members:
            return
        pos = self.members.index(instance)
        del self.members[pos]
        if pos < self.rr_cursor:
            self.rr_cursor -= 1
        if not self.members or self.rr_cursor >= len(self.members):
            self.rr_cursor = 0

    def _reevaluate(self, instance: InstanceId) -> None:
        hist = self.histories[instance]
        limit = self.settings.violation_limit
        over_limit = limit is not None and hist.consecutive_violations >= limit
        passes = self.service.requirement.passes(hist.estimate.predicted_response_time)
        if instance in self.members:
            if over_limit or not passes:
                self._eject(instance)
                log.debug("ejected %s from %s pool", instance, self.name)
        elif passes and hist.consecutive_violations == 0:
            self._admit(instance)
            log.debug("admitted %s to %s pool", instance, self.name)

    # -- the four update paths ---------------------------------------------

    def on_instance_event(self, ev: ClusterEvent, initial_estimate_for_added: float = 0.0) -> None:
        inst = ev.instance
        if inst.service != self.name:
            raise ValueError(f"event for {inst.service!r} applied to pool {self.name!r}")
        if ev.kind is ClusterEventKind.ADDED:
            if inst in self.histories:
                return
            est = QoSEstimate(float(initial_estimate_for_added), 0, ev.at)
            self.histories[inst] = InstanceHistory(inst, est)
            self._reevaluate(inst)
        else:
            if inst not in self.histories:
                log.warning("pool %s: removal of unknown instance %s ignored", self.name, inst)
                return
            self._eject(inst)
            del self.histories[inst]

    def record_measurement(self, m: Measurement) -> None:
        hist = self.histories.get(m.instance)
        if hist is None:
            raise UnknownInstanceError(m.instance)
        if m.ok:
            beta = self.settings.beta
            old = hist.estimate
            predicted = (1.0 - beta) * old.predicted_response_time + beta * m.response_time
            hist.estimate = QoSEstimate(predicted, old.sample_count + 1, m.at, EstimateSource.MEASURED)
            if self.service.requirement.passes(m.response_time):
                hist.consecutive_violations = 0
            else:
                hist.consecutive_violations += 1
        else:
            hist.consecutive_violations += 1
        self._reevaluate(m.instance)

    def reestimate(self, instance: InstanceId, estimate: float, now: Tick = 0) -> None:
        """Replace an estimate with a fresh approximation and clear its violation streak."""
        hist = self.histories.get(instance)
        if hist is None:
            raise UnknownInstanceError(instance)
        hist.estimate = replace(
            hist.estimate,
            predicted_response_time=float(estimate),
            last_updated=now,
            source=EstimateSource.INITIAL,
        )
        hist.consecutive_violations = 0
        # re-place a surviving member at its new rank
        if instance in self.members:
            self._eject(instance)
        self._reevaluate(instance)

    def to_dict(self) -> dict:
        return {
            "service": self.name,
            "max_response_time_ms": self.service.requirement.max_response_time,
            "members": [str(i) for i in self.members],
            "rr_cursor": self.rr_cursor,
            "instances": [
                {
                    "instance": str(i),
                    "member": i in self.members,
                    "predicted_response_time_ms": h.estimate.predicted_response_time,
                    "sample_count": h.estimate.sample_count,
                    "source": h.estimate.source.value,
                    "consecutive_violations": h.consecutive_violations,
                }
                for i, h in sorted(self.histories.items())
            ],
        }


def create_pool(spec, snapshot, initial_estimates, now=0, settings=None) -> QoSPool:
    return QoSPool.create(spec, snapshot, initial_estimates, now, settings)


@dataclass(frozen=True)
class EnvironmentEvent:
    kind: str  # link-latency-changed | node-overloaded | generic-disruption
    affected_nodes: frozenset[NodeId]
    at: Tick = 0

    KINDS = ("link-latency-changed", "node-overloaded", "generic-disruption")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown environment event kind {self.kind!r}")
        if not self.affected_nodes:
            raise ValueError("environment event must affect at least one node")
        object.__setattr__(self, "affected_nodes", frozenset(self.affected_nodes))


def on_environment_event(
    pools: Mapping[ServiceName, QoSPool],
    ev: EnvironmentEvent,
    reestimate: Callable[[InstanceId], float],
) -> dict[ServiceName, QoSPool]:
    """Re-estimate every instance sitting on an affected node, pool by pool.

    Pools without such instances are passed through untouched.
    """
    for pool in pools.values():
        hit = [i for i in pool.instances() if i.node in ev.affected_nodes]
        for inst in hit:
            pool.reestimate(inst, reestimate(inst), ev.at)
    return dict(pools)


def initial_estimate(network_rtt_ms: float, settings: PoolSettings) -> float:
    """Latency-only approximation used before any request has been measured."""
    return network_rtt_ms + settings.prior_processing_ms


def iter_non_members(pool: QoSPool) -> Iterable[InstanceId]:
    return (i for i in pool.instances() if i not in pool.members)
