import time

import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


class Criterion:
    """Times one acceptance criterion and records its verdict for the summary."""

    def __init__(self, number: int, title: str, budget: float):
        self.number = number
        self.title = title
        self.budget = budget
        self.notes: list[str] = []
        self.start = time.perf_counter()

    def note(self, text: str) -> None:
        self.notes.append(text)

    def finish(self, ok: bool) -> None:
        elapsed = time.perf_counter() - self.start
        in_time = elapsed < self.budget
        detail = "; ".join(self.notes + [f"{elapsed:.2f} s of {self.budget:g} s"])
        _RESULTS[self.number] = (ok and in_time, f"{self.title}: {detail}")
        assert in_time, f"criterion {self.number} took {elapsed:.2f} s (budget {self.budget:g} s)"


@pytest.fixture
def criterion():
    made = []

    def make(number, title, budget):
        c = Criterion(number, title, budget)
        made.append(c)
        return c

    yield make
    for c in made:
        if c.number not in _RESULTS:
            _RESULTS[c.number] = (False, f"{c.title}: {'; '.join(c.notes) or 'did not finish'}")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, line = _RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:2d}. {line}")
