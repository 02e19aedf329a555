import time

import pytest


def pytest_configure(config):
    config.acceptance_lines = []


class Criterion:
    def __init__(self, lines, number, name, budget):
        self.lines = lines
        self.number = number
        self.name = name
        self.budget = budget
        self.failures = []
        self.details = []

    def check(self, ok, detail):
        self.details.append(detail)
        if not ok:
            self.failures.append(detail)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        if elapsed >= self.budget:
            self.failures.append(f"runtime {elapsed:.1f}s over the {self.budget:g}s budget")
        if exc is not None:
            self.failures.append(f"{exc_type.__name__}: {exc}")
        status = "PASS" if not self.failures else "FAIL"
        shown = self.failures if self.failures else self.details
        self.lines.append(f"[{status}] #{self.number:<2} {self.name} ({elapsed:.1f}s): " + "; ".join(shown))
        if exc is None and self.failures:
            raise AssertionError("; ".join(self.failures))
        return False


@pytest.fixture
def criterion(request):
    def make(number, name, budget):
        return Criterion(request.config.acceptance_lines, number, name, budget)
    return make


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
