"""Kernel backend selection.

Hot numeric loops ship in two variants: numba-jitted and pure numpy. The
active variant is chosen once at import from the EXPANDQUANT_BACKEND
environment variable:

  * "auto"  (default) -- numba if importable, else numpy
  * "numba"           -- require numba, raise if unavailable
  * "numpy"           -- force the pure-numpy paths (useful for debugging
                         and for benchmarking the kernels against each other)

Both variants compute identical results; see benchmarks/bench_kernels.py.
"""

import os

_CHOICES = ("auto", "numba", "numpy")


def _resolve() -> bool:
    mode = os.environ.get("EXPANDQUANT_BACKEND", "auto").strip().lower()
    if mode not in _CHOICES:
        raise ValueError(
            f"EXPANDQUANT_BACKEND must be one of {_CHOICES}, got {mode!r}"
        )
    if mode == "numpy":
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        if mode == "numba":
            raise
        return False
    return True


USE_NUMBA: bool = _resolve()


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
