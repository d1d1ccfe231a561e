import pytest

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """``record(criterion, check, ok, detail)`` stores one sub-check outcome and returns ``ok``."""

    def record(criterion, check, ok, detail=""):
        _ACCEPTANCE.setdefault(criterion, []).append((check, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_ACCEPTANCE):
        checks = _ACCEPTANCE[criterion]
        verdict = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        parts = [f"{name} {'ok' if ok else 'FAILED'}" + (f" [{detail}]" if detail else "")
                 for name, ok, detail in checks]
        terminalreporter.write_line(f"criterion {criterion:>2}: {verdict}  " + "; ".join(parts))
