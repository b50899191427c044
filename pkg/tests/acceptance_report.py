"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
import time

LINES = {}


class Criterion:
    """Times a criterion and records its verdict; use as a context manager."""

    def __init__(self, number, title, limit_s=None):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.checks = []

    def check(self, ok, detail):
        self.checks.append((bool(ok), detail))

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        if exc_type is not None:
            self.checks.append((False, f"raised {exc_type.__name__}: {exc}"))
        if self.limit_s is not None:
            self.checks.append((elapsed < self.limit_s, f"runtime {elapsed:.1f}s < {self.limit_s:g}s"))
        ok = all(c[0] for c in self.checks)
        failed = [d for c, d in self.checks if not c]
        detail = "; ".join(failed if failed else [d for _, d in self.checks])
        line = f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'} [{elapsed:7.1f}s] {self.title}: {detail}"
        LINES[self.number] = line
        print(line)
        if exc_type is None:
            assert ok, line
        return False
