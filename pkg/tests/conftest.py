from __future__ import annotations

import pytest

from pmig.core import Node
from pmig.proto import Coordinator, Daemon


class Pair:
    """A source node with a coordinator and a destination node with a daemon."""

    def __init__(self, page_size: int = 4096, modules=None, dst_modules=None, **node_opts):
        self.src = Node("src", page_size=page_size, modules=modules, **node_opts)
        self.dst = Node("dst", page_size=page_size,
                        modules=dst_modules if dst_modules is not None else modules, **node_opts)
        self.daemon = Daemon(self.dst)
        self.coordinator = Coordinator(self.src)

    def close(self) -> None:
        self.coordinator.close()
        self.daemon.wait_idle()
        self.daemon.close()
        self.src.close()
        self.dst.close()


@pytest.fixture
def make_pair():
    pairs = []

    def factory(**kwargs) -> Pair:
        pair = Pair(**kwargs)
        pairs.append(pair)
        return pair

    yield factory
    for pair in pairs:
        pair.close()


@pytest.fixture
def pair(make_pair) -> Pair:
    return make_pair()


@pytest.fixture
def node():
    n = Node("local")
    yield n
    n.close()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)


@pytest.fixture
def verdict(request, capsys):
    """Collects a criterion's number and details; prints one PASS/FAIL line at teardown."""
    info = {"n": None, "title": "", "detail": ""}
    yield info
    rep = getattr(request.node, "rep_call", None)
    status = "PASS" if rep is not None and rep.passed else "FAIL"
    with capsys.disabled():
        print(f"\ncriterion {info['n']:>2} {status}: {info['title']} [{info['detail']}]")
