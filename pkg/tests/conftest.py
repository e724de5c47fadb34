import pytest

_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(name, ok, detail)`` records a pass/fail line, then asserts ``ok``."""

    def check(name: str, ok: bool, detail: str = "") -> None:
        _RESULTS[name] = (bool(ok), detail)
        print(f"{name} {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"{name}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda name: (int("".join(ch for ch in name[2:] if ch.isdigit()) or 0), name)
    for name in sorted(_RESULTS, key=key):
        ok, detail = _RESULTS[name]
        terminalreporter.write_line(f"{name:<5} {'PASS' if ok else 'FAIL'}  {detail}")
