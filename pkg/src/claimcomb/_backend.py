"""Backend switch for the compiled kernels.

Set ``CLAIMCOMB_DISABLE_NUMBA=1`` before import to force the pure-numpy
kernels. The flag is read once at import time.
"""
import os

_FLAG = os.environ.get("CLAIMCOMB_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _FLAG not in ("", "0", "false", "no")

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not DISABLED_BY_ENV


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
