"""Outcome lines collected by the acceptance tests, printed in the summary."""

from __future__ import annotations

import time
from contextlib import contextmanager
from typing import Iterator

RESULTS: list[tuple[int, str]] = []


@contextmanager
def criterion(number: int, title: str, limit_s: float | None = None) -> Iterator[None]:
    """Time the body and log one PASS/FAIL line; a slow pass is a failure."""
    start = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        in_time = limit_s is None or elapsed < limit_s
        verdict = "PASS" if ok and in_time else "FAIL"
        budget = f" (limit {limit_s:g}s)" if limit_s is not None else ""
        note = "" if in_time else " too slow"
        line = f"{verdict} criterion {number}: {title} [{elapsed:.2f}s{budget}]{note}"
        RESULTS.append((number, line))
        print(line)
    assert in_time, f"criterion {number} took {elapsed:.2f}s, limit {limit_s}s"
