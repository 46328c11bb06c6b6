import pytest

CRITERIA = {
    1: "gradient suite",
    2: "solver identities",
    3: "adapter no-op and frozen base",
    4: "teacher sanity",
    5: "sub-trajectory discipline",
    6: "noise-bucket table",
    7: "kappa selection",
    8: "dual-expert ordering",
    9: "weight-diff oracle",
    10: "determinism and persistence",
}
_RESULTS: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def gate():
    """gate(n, ok, detail) records one check for criterion n and asserts it."""
    def record(n: int, ok: bool, detail: str) -> None:
        _RESULTS.setdefault(n, []).append((bool(ok), detail))
        assert ok, f"criterion {n}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance")
    for n, name in CRITERIA.items():
        checks = _RESULTS.get(n)
        if not checks:
            terminalreporter.write_line(f"ACCEPTANCE {n:2d} NOT RUN  {name}")
            continue
        status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"ACCEPTANCE {n:2d} {status}     {name}: {detail}")
