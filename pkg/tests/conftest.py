import pytest

# acceptance verdicts, filled in by test_acceptance.py and echoed at the end of the run
VERDICTS: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion checked by a test")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[k])
    passed = sum(v.startswith("[PASS]") for v in VERDICTS.values())
    terminalreporter.write_line(f"{passed}/{len(VERDICTS)} criteria passed")


@pytest.fixture
def verdict(request):
    """``verdict(ok, detail)`` records one pass/fail line for the test's criterion and asserts ``ok``."""
    number, name = request.node.get_closest_marker("criterion").args

    def record(ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}" + (f": {detail}" if detail else "")
        VERDICTS[number] = line
        print(line)
        assert ok, line

    yield record
    VERDICTS.setdefault(number, f"[FAIL] {number:2d} {name}: raised before reaching a verdict")
