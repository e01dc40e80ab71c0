import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    def _record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
