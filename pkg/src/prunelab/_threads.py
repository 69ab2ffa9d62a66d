"""Pin the BLAS pool to one thread.

Small-matrix training is faster single-threaded here, and a fixed
thread configuration keeps runs bitwise reproducible.  The environment
variables only work when set before the BLAS library loads, so this
also talks to an already-loaded OpenBLAS through its C API (symbol
names vary across builds; every known spelling is tried).
"""

import ctypes
import glob
import os
import sys

_SYMBOLS = (
    "openblas_set_num_threads",
    "openblas_set_num_threads64_",
    "scipy_openblas_set_num_threads64_",
    "scipy_openblas_set_num_threads_64_",
)


def pin_single_thread():
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    if "numpy" not in sys.modules:
        return  # env vars will apply when numpy loads
    import numpy

    roots = [os.path.join(os.path.dirname(numpy.__file__), "..", "numpy.libs")]
    for root in roots:
        for path in glob.glob(os.path.join(root, "*openblas*")):
            try:
                lib = ctypes.CDLL(path)
            except OSError:
                continue
            for sym in _SYMBOLS:
                fn = getattr(lib, sym, None)
                if fn is not None:
                    fn(1)
                    return
