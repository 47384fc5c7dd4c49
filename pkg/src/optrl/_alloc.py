"""glibc allocator tuning.

The desk-scale activations (256 x 64 float64) are exactly 128 KiB, glibc's
default mmap threshold, so every temporary would be a fresh mmap that
page-faults on first touch.  Raising the thresholds keeps those blocks on the
heap and roughly halves the cost of a forward pass.  Set OPTRL_NO_MALLOC_TUNING
to skip it.
"""

import ctypes
import os
import sys

_M_TRIM_THRESHOLD, _M_MMAP_THRESHOLD = -1, -3


def tune_allocator() -> bool:
    if os.environ.get("OPTRL_NO_MALLOC_TUNING") or not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 64 * 1024 * 1024)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 256 * 1024 * 1024)
        return bool(ok)
    except (OSError, AttributeError):
        return False
