import pytest

_RESULTS: list[tuple[str, str, bool, str]] = []


class CriterionLog:
    def __init__(self, number: str, title: str):
        self.number, self.title, self.detail = number, title, ""

    def record(self, passed: bool, detail: str) -> bool:
        self.detail = detail
        _RESULTS.append((self.number, self.title, bool(passed), detail))
        print(f"CRITERION {self.number} {'PASS' if passed else 'FAIL'}: {self.title} | {detail}")
        return passed


@pytest.fixture()
def criterion():
    return CriterionLog


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_RESULTS, key=lambda r: int(r[0])):
        terminalreporter.write_line(f"CRITERION {number} {'PASS' if passed else 'FAIL'}: {title} | {detail}")
