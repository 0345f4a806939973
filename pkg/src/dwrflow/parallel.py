"""
Shared-memory element loops.

Kernels are written against index ranges ``[lo, hi)`` and write disjoint
slices of preallocated outputs, so results do not depend on how the range
is split or on the number of threads.  numpy releases the GIL inside its
inner loops, which is where the work of the chunked kernels happens.
"""
import os
from concurrent.futures import ThreadPoolExecutor

_DEFAULT_CHUNK = 4096


class ElementLoop:
    """Run ``kernel(lo, hi)`` over ``range(n)`` on a fixed number of threads."""

    def __init__(self, threads=1, chunk=None):
        if int(threads) < 1:
            raise ValueError("thread count must be >= 1")
        self.threads = int(threads)
        self.chunk = chunk
        self._pool = None

    def __repr__(self):
        return f"ElementLoop(threads={self.threads})"

    def _executor(self):
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.threads)
        return self._pool

    def ranges(self, n):
        # chunk boundaries never depend on the thread count
        if n <= 0:
            return []
        chunk = self.chunk or _DEFAULT_CHUNK
        return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]

    def run(self, kernel, n):
        parts = self.ranges(n)
        if self.threads == 1 or len(parts) <= 1:
            for lo, hi in parts:
                kernel(lo, hi)
            return
        futures = [self._executor().submit(kernel, lo, hi) for lo, hi in parts]
        for f in futures:
            f.result()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


_engine = ElementLoop(int(os.environ.get("DWRFLOW_THREADS", "1")))


def get_engine():
    return _engine


def set_threads(n):
    """Replace the process-wide element loop with one using ``n`` threads."""
    global _engine
    if n != _engine.threads:
        _engine.close()
        _engine = ElementLoop(n)
    return _engine
