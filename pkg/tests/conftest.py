import pytest

# criterion id -> list of (description, passed)
ACCEPTANCE: dict[str, list[tuple[str, bool]]] = {}


@pytest.fixture
def record():
    def _record(criterion: str, description: str, passed: bool) -> bool:
        ACCEPTANCE.setdefault(criterion, []).append((description, bool(passed)))
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE, key=lambda c: int(c.split()[-1])):
        parts = ACCEPTANCE[crit]
        status = "PASS" if all(ok for _, ok in parts) else "FAIL"
        detail = "; ".join(f"{d} [{'ok' if ok else 'FAIL'}]" for d, ok in parts)
        terminalreporter.write_line(f"{status}  {crit}: {detail}")
