"""Backend selection for the numerical kernels.

The compiled extension is used when it imports; set ``CPAEM_PURE_PYTHON=1`` to
force the numpy implementation.
"""

from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("CPAEM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

bvn_upper = _impl.bvn_upper
piece_moments = _impl.piece_moments
norm_sf = _pykernels.norm_sf
norm_pdf = _pykernels.norm_pdf
