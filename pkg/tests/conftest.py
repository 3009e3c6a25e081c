from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"

_criteria = pytest.StashKey[dict]()


@pytest.fixture
def tiny_scene_path():
    return DATA / "tiny.scene"


@pytest.fixture
def tiny_config_path():
    return DATA / "tiny.cfg"


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    table = request.config.stash.setdefault(_criteria, {})

    def check(number: int, passed: bool, detail: str) -> None:
        table[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        assert passed, table[number]

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_criteria, {})
    if table:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(table):
            terminalreporter.write_line(table[number])
