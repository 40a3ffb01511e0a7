"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy implementation in ``_fallback`` is used. Setting ``TADM_PURE_PYTHON=1``
forces the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
im2col3d = _fallback.im2col3d
col2im3d = _fallback.col2im3d

if os.environ.get("TADM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        im2col3d = _kernels.im2col3d
        col2im3d = _kernels.col2im3d
