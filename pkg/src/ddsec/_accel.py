"""Numba switch.

Set ``DDSEC_DISABLE_NUMBA=1`` in the environment before import to force the
pure-numpy kernels (also used automatically when numba is missing).
"""

import os

_DISABLED = os.environ.get("DDSEC_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    import numba  # noqa: F401
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED

