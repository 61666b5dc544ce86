"""Process-level knobs: BLAS thread pinning and the glibc allocator.

Training allocates and frees many multi-megabyte temporaries per iteration.
With glibc defaults each one is a fresh ``mmap`` that the kernel must fault in
and zero, which costs about a third of an iteration.  Raising the mmap and
trim thresholds keeps that memory on the heap for reuse.
"""

import ctypes
import ctypes.util
import os
import sys

THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_tuned = False


def pin_threads(n=1):
    """Set BLAS/OpenMP thread counts.  Only effective before numpy is imported."""
    for k in THREAD_VARS:
        os.environ.setdefault(k, str(n))


def tune_allocator():
    """Keep large blocks on the glibc heap.  No-op elsewhere; returns success."""
    global _tuned
    if _tuned:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 32 << 20) == 1
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30) == 1
    except (OSError, AttributeError):
        return False
    _tuned = bool(ok)
    return _tuned


def thread_info():
    return {k: os.environ.get(k) for k in THREAD_VARS}
