import pytest

from dmtree import Cluster, Fabric, FabricConfig, Session, TreeConfig
from dmtree.bench.driver import make_tree


def build(engine="sherman", n_ms=2, n_cs=1, threads=1, items=(), fabric=None,
          tree=None, cache_bytes=64 << 20, fill=0.8, **kwargs):
    fab = Fabric(n_ms, fabric or FabricConfig())
    t = make_tree(engine, fab, tree or TreeConfig(), **kwargs)
    t.bulkload(items, fill)
    cluster = Cluster(fab, n_cs, threads, node_size=t.fmt.node_size, cache_bytes=cache_bytes)
    return fab, t, cluster


def session(engine="sherman", **kwargs):
    fab, t, cluster = build(engine, **kwargs)
    return Session(t, cluster.thread(0, 0)), t, cluster


@pytest.fixture(params=["sherman", "fgplus"])
def engine(request):
    return request.param


# one line per acceptance criterion, printed after the run
CRITERIA: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
