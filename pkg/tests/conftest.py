import sys

import pytest

from cclpol.corpus import corpus_manifest, corpus_path
from cclpol.isa import load_file
from cclpol._data import DATA_DIR

POLICIES = DATA_DIR / "policies"


def policy_path(name: str):
    return POLICIES / f"{name}.cclpol"


@pytest.fixture(scope="session")
def manifest():
    return corpus_manifest()


@pytest.fixture(scope="session")
def safe_programs(manifest):
    return [load_file(e.path) for e in manifest if e.expected is None]


@pytest.fixture
def tuner():
    return load_file(policy_path("size_aware_adaptive"))


@pytest.fixture
def profiler():
    return load_file(corpus_path("safe/record_latency.cclpol"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
