"""Kernel backend selection.

The hot loops exist twice: a numba-jitted version and a plain numpy
version with identical signatures.  ``MIRRORDECONV_BACKEND`` picks one
at import time:

* unset       -> numba if importable, else numpy
* ``numba``   -> require the jitted kernels (raise if numba is missing)
* ``numpy``   -> force the pure-numpy fallback

``benchmarks/bench_kernels.py`` times the two side by side.
"""

import os

ENV_VAR = "MIRRORDECONV_BACKEND"


def _select():
    choice = os.environ.get(ENV_VAR, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise RuntimeError(
            f"{ENV_VAR} must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numpy":
        from . import _kernels_numpy
        return _kernels_numpy, "numpy"
    if choice == "numba":
        from . import _kernels_numba
        return _kernels_numba, "numba"
    try:
        from . import _kernels_numba
        return _kernels_numba, "numba"
    except ImportError:
        from . import _kernels_numpy
        return _kernels_numpy, "numpy"


kernels, _BACKEND_NAME = _select()


def active_backend():
    """Name of the kernel implementation in use: 'numba' or 'numpy'."""
    return _BACKEND_NAME


def set_thread_count(n):
    """Cap worker threads for the jitted kernels; no-op on the numpy path.

    Values above what the machine/numba allows are clamped rather than
    rejected so scripted runs behave the same everywhere.
    """
    if _BACKEND_NAME != "numba":
        return
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(max(1, min(int(n), limit)))
