import time

import pytest

_LINES: list[str] = []


class Criterion:
    def __init__(self, name):
        self.name = name
        self.start = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.start

    def check(self, ok: bool, detail: str, limit: float | None = None):
        elapsed = self.elapsed
        in_time = limit is None or elapsed < limit
        status = "PASS" if ok and in_time else "FAIL"
        timing = f"{elapsed:.2f}s" + (f" (limit {limit:g}s)" if limit else "")
        _LINES.append(f"[{status}] {self.name}: {detail}; {timing}")
        assert ok, detail
        assert in_time, f"took {elapsed:.2f}s, limit {limit}s"


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
