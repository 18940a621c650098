import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ppomi.worldgen import WorldConfig, build_world  # noqa: E402


@pytest.fixture(scope="session")
def default_world():
    return build_world(WorldConfig(), 0)


@pytest.fixture(scope="session")
def two_class_world():
    return build_world(WorldConfig(n_classes=2), 3)


# acceptance criteria report: number -> (passed, detail)
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
