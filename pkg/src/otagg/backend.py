"""Kernel backend selection: numba-compiled or pure numpy.

The hot numeric kernels in :mod:`otagg.kernels` are written once, in the
numpy subset that numba can compile. At import time this module decides
whether they run compiled (numba) or as plain numpy, controlled by the
``OTAGG_BACKEND`` environment variable:

    auto   (default) use numba when importable, else numpy
    numba  require numba; raise if it cannot be imported
    numpy  force the pure-numpy path

`kernels.set_backend()` can switch the live binding afterwards, which the
benchmark command uses to time both paths in one process.
"""

from __future__ import annotations

import os

_ENV_VAR = "OTAGG_BACKEND"
_CHOICES = ("auto", "numba", "numpy")


def _requested() -> str:
    value = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if value not in _CHOICES:
        raise ValueError(
            f"{_ENV_VAR}={value!r} is not one of {'/'.join(_CHOICES)}"
        )
    return value


def resolve_backend() -> str:
    """Return the backend name selected by the environment: 'numba' or 'numpy'."""
    choice = _requested()
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise ImportError(
                f"{_ENV_VAR}=numba but numba is not importable"
            ) from None
        return "numpy"
    return "numba"


def numba_available() -> bool:
    """Whether the compiled backend can be used in this process."""
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def compile_kernel(fn):
    """Return the numba-compiled version of ``fn`` (cached, nopython)."""
    import numba

    return numba.njit(cache=True)(fn)
