"""Hot kernels: compiled Cython core with a NumPy fallback chosen at import.

Set ``FLOWRECON_PURE_PYTHON=1`` to force the fallback.  ``BACKEND`` names the
active implementation ("cython" or "numpy").
"""

import os

from . import _fallback

fallback = _fallback

if os.environ.get("FLOWRECON_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "numpy"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "numpy"

compiled = _impl if BACKEND == "cython" else None

im2col = _impl.im2col
col2im = _impl.col2im
radon_project = _impl.radon_project
radon_backproject = _impl.radon_backproject
fbp_backproject = _impl.fbp_backproject

__all__ = ["BACKEND", "im2col", "col2im", "radon_project", "radon_backproject",
           "fbp_backproject", "fallback", "compiled"]
