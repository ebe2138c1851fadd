import pytest

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record the outcome of one acceptance criterion; a summary line per
    criterion is printed at the end of the session."""

    def record(criterion: int, title: str, checks: dict, detail: str = ""):
        ok = all(checks.values())
        failed = [name for name, passed in checks.items() if not passed]
        _ACCEPTANCE[criterion] = (title, ok, detail, failed)
        return ok, failed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        title, ok, detail, failed = _ACCEPTANCE[key]
        line = f"criterion {key}: {'PASS' if ok else 'FAIL'} - {title}"
        if detail:
            line += f" [{detail}]"
        if failed:
            line += f" failed checks: {', '.join(failed)}"
        terminalreporter.write_line(line)
