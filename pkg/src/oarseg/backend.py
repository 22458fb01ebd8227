"""Compute-backend selection for the hot numeric kernels.

Two implementations of the convolution kernels exist: numba-jitted loops
(fast, default) and pure numpy (fallback).  Selection happens once at import
time via the ``OARSEG_BACKEND`` environment variable:

    OARSEG_BACKEND=numba   force numba (error if numba is unavailable)
    OARSEG_BACKEND=numpy   force the pure-numpy path
    unset                  numba when importable, numpy otherwise

Both backends are deterministic run-to-run: the numba kernels parallelize
only over independent output channels, so every accumulator is summed by a
single thread in a fixed order.  The two backends are not bitwise identical
to each other (different summation order); they agree to float rounding.

``benchmarks/bench_backends.py`` compares the two.
"""

from __future__ import annotations

import os

_env = os.environ.get("OARSEG_BACKEND", "").strip().lower()

if _env not in ("", "numba", "numpy"):
    raise RuntimeError(f"OARSEG_BACKEND must be 'numba' or 'numpy', got {_env!r}")

if _env == "numpy":
    NUMBA_ENABLED = False
else:
    try:
        import numba  # noqa: F401

        NUMBA_ENABLED = True
    except ImportError:
        if _env == "numba":
            raise RuntimeError("OARSEG_BACKEND=numba but numba is not importable")
        NUMBA_ENABLED = False

BACKEND = "numba" if NUMBA_ENABLED else "numpy"


def set_num_threads(n: int) -> None:
    """Limit kernel-level parallelism (no-op on the numpy backend)."""
    if NUMBA_ENABLED and n >= 1:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
