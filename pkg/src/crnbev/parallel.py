"""Worker-count control.

The thread count drives the numba kernels, which split work by query, row or
tile. BLAS stays on one thread: ``linear`` feeds it fixed 256-row blocks that
are too small to gain from threading, and a single thread keeps its
reductions in one fixed order.
"""
from __future__ import annotations

import contextlib

import numba
from threadpoolctl import threadpool_limits

_state = {"threads": 1}


def current_threads() -> int:
    return _state["threads"]


def apply_numba_threads() -> None:
    numba.set_num_threads(min(_state["threads"], numba.config.NUMBA_NUM_THREADS))


@contextlib.contextmanager
def threads(n: int):
    """Run the enclosed block with ``n`` workers for the parallel kernels."""
    if n < 1:
        raise ValueError("thread count must be >= 1")
    prev = _state["threads"]
    _state["threads"] = n
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        _state["threads"] = prev
