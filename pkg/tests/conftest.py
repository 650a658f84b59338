import re

import pytest

from oshx.data import synth_generate
from oshx.tensor import make_rng

CRITERIA = {
    1: "shape conformance",
    2: "parameter-count oracle",
    3: "gradient suite",
    4: "metric oracle",
    5: "learning smoke test",
    6: "pipeline invariants",
    7: "determinism",
    8: "paper-preset pipeline and report format",
}
_outcomes: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"::test_criterion_(\d+)", report.nodeid)
    if m is None or (report.when != "call" and report.passed):
        return
    _outcomes.setdefault(int(m.group(1)), []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        ok = all(o == "passed" for o in _outcomes[n])
        terminalreporter.write_line(f"criterion {n} ({CRITERIA[n]}): {'PASS' if ok else 'FAIL'}")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def synth64(tmp_path_factory):
    """Synthetic tree with 64 images per class at 64 px."""
    root = tmp_path_factory.mktemp("synth64")
    synth_generate(root, per_class=64, side=64, seed=0)
    return root


@pytest.fixture(scope="session")
def synth8(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth8")
    synth_generate(root, per_class=8, side=64, seed=0)
    return root
