import pytest

from qedgeproxy.emulator import Topology, paper_topology
from qedgeproxy.model import ClusterSnapshot, ServiceSpec

from .helpers import s


@pytest.fixture
def dps() -> ServiceSpec:
    return ServiceSpec.latency("dps", 80)


@pytest.fixture
def topology() -> Topology:
    return paper_topology()


@pytest.fixture
def seven() -> ClusterSnapshot:
    return ClusterSnapshot.of([s(i) for i in range(1, 8)])


def pytest_terminal_summary(terminalreporter):
    from .helpers import CRITERIA

    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(CRITERIA):
        terminalreporter.write_line(f"criterion {number}: {verdict} - {detail}")
