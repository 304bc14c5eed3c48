import pytest

_VERDICTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the test still asserts on its own."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append((criterion, bool(ok), detail))
        print(f"[acceptance {criterion}] {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(_VERDICTS, key=lambda v: (len(v[0].rstrip("abcd")), v[0])):
        terminalreporter.write_line(f"[{criterion:>3}] {'PASS' if ok else 'FAIL'}  {detail}")
