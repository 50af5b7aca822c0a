"""Hot-kernel dispatch: the compiled extension when it imports, numpy otherwise.

Set ``CROSSALIGN_PURE_PYTHON=1`` to force the numpy path.
"""
import os

from . import _kernels_py

if os.environ.get("CROSSALIGN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels_c as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND: str = _impl.BACKEND
sqdist = _impl.sqdist
sqdist_backward = _impl.sqdist_backward
gru_scan = _impl.gru_scan
gru_scan_backward = _impl.gru_scan_backward


def available_backends() -> dict:
    found = {"python": _kernels_py}
    try:
        from . import _kernels_c
        found["cython"] = _kernels_c
    except ImportError:
        pass
    return found
