"""Process-level performance defaults for entry points (CLI, test suite).

Training is deliberately single-threaded: the batch matmuls are too
small for BLAS threading to win, and the determinism contract is stated
for one thread. The malloc tweak keeps the ~0.5 MB activation buffers on
the heap free lists instead of round-tripping through mmap on every
network evaluation. Libraries importing sidlab are not affected; only
entry points call this.
"""

import ctypes
import os
import sys

M_MMAP_THRESHOLD = -3


def set_runtime_defaults():
    if "numpy" not in sys.modules:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")
    else:
        try:
            from threadpoolctl import threadpool_limits

            threadpool_limits(limits=1, user_api="blas")
        except Exception:
            pass
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(M_MMAP_THRESHOLD, 64 * 1024 * 1024)
    except Exception:
        pass
