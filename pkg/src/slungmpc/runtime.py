"""Process-level runtime knobs shared by the CLI and the test harness."""

from __future__ import annotations

import os

from threadpoolctl import threadpool_limits

THREADS_ENV = "SLUNGMPC_THREADS"


def limit_threads(n: int | None = None) -> int:
    """Cap the BLAS thread pools; returns the limit applied.

    The dense linear algebra here runs on matrices of a few hundred rows,
    where multithreaded BLAS oversubscribes the CPU and adds tens of
    milliseconds of jitter per solve.  Defaults to the ``SLUNGMPC_THREADS``
    environment variable, falling back to one thread.
    """
    if n is None:
        n = int(os.environ.get(THREADS_ENV, "1"))
    if n < 1:
        raise ValueError("thread count must be at least one")
    threadpool_limits(limits=n)
    return n
