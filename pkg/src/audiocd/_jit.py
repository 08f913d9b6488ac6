"""numba shim.

Set ``AUDIOCD_NUMBA=0`` to run the pure-numpy kernels instead of the jitted
ones (useful for debugging or on platforms without numba).
"""

import os

_flag = os.environ.get("AUDIOCD_NUMBA", "1").strip().lower()
JIT_REQUESTED = _flag not in {"0", "false", "no", "off"}

try:
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def _njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrapper(f):
            return f

        return wrapper


JIT_ENABLED = JIT_REQUESTED and HAS_NUMBA


def njit(*args, **kwargs):
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)
