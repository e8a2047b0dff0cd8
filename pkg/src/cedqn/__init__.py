"""Communication-gated multi-agent DQN for cooperative box lifting."""

import ctypes
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def _keep_temporaries_on_heap():
    # glibc serves blocks above 128 KiB with fresh mmaps, so every mid-sized
    # numpy temporary (a batched layer activation, an Adam moment update)
    # page-faults on first touch.  On slow VMs that doubled step time.
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, 64 << 20)
        libc.mallopt(_M_TRIM_THRESHOLD, 128 << 20)
    except (OSError, AttributeError):
        pass


_keep_temporaries_on_heap()
