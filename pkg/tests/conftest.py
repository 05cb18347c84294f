"""Shared pytest hooks: the acceptance suite reports one line per criterion."""

import pytest

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict(request, capsys):
    """Record a criterion verdict, print it live and fail the test if it did not hold."""

    def record(name: str, ok: bool, detail: str = ""):
        ACCEPTANCE[name] = (ok, detail)
        with capsys.disabled():
            print(f"\n{name}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
