"""Runtime instrumentation: multiply-accumulate counting and activation liveness.

A :class:`Tracker` is installed per thread with :func:`track`. Kernels report
their MAC counts through :func:`add_macs`; the autodiff layer reports every
freshly allocated op output through :func:`note_alloc`. Allocation bytes are
released when the owning array is garbage collected, so the recorded peak is
the true high-water mark of live activations in the running forward pass.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager

import numpy as np

_local = threading.local()


class Tracker:
    def __init__(self):
        self.macs = 0
        self.live_bytes = 0
        self.peak_bytes = 0
        self.allocations = 0

    def _release(self, nbytes):
        self.live_bytes -= nbytes

    def alloc(self, arr: np.ndarray):
        if arr.base is not None:
            # views share storage that was already counted
            return
        self.allocations += 1
        self.live_bytes += arr.nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        weakref.finalize(arr, self._release, arr.nbytes)


def current() -> Tracker | None:
    return getattr(_local, "tracker", None)


def add_macs(count: int):
    t = current()
    if t is not None:
        t.macs += int(count)


def note_alloc(arr: np.ndarray):
    t = current()
    if t is not None:
        t.alloc(arr)


@contextmanager
def track():
    prev = current()
    t = Tracker()
    _local.tracker = t
    try:
        yield t
    finally:
        _local.tracker = prev
