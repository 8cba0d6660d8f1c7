"""Per-thread reusable work arrays for the request-scoring hot path.

Request scoring streams through a few arrays whose sizes repeat from
request to request (distance matrices, gathered key/value blocks).
Allocating them per call makes every request touch that many cold pages,
which on memory-bandwidth-starved hosts costs more than the arithmetic;
reuse keeps the pages warm.  Buffers are keyed by (tag, shape, dtype)
and bound to the thread, so concurrent scorers stay independent.
"""

from __future__ import annotations

import threading

import numpy as np

_local = threading.local()


def scratch_buf(tag: str, shape, dtype) -> np.ndarray:
    """Reusable work array for this thread (contents undefined on entry)."""
    store = getattr(_local, "bufs", None)
    if store is None:
        store = _local.bufs = {}
    key = (tag, shape, np.dtype(dtype).str)
    buf = store.get(key)
    if buf is None:
        buf = store[key] = np.empty(shape, dtype)
    return buf
