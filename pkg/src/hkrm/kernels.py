"""Backend selection for the pairwise kernels.

The compiled extension is used when it has been built; otherwise the numpy
fallback is imported. Set ``HKRM_PURE_PYTHON=1`` to force the fallback.
"""

import os

from hkrm import _kernels_py

if os.environ.get("HKRM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from hkrm import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
pairwise_l1 = _impl.pairwise_l1
pairwise_l1_pairs = _impl.pairwise_l1_pairs
pairwise_l1_pairs_backward = _impl.pairwise_l1_pairs_backward
row_normalize = _impl.row_normalize
row_normalize_backward = _impl.row_normalize_backward

__all__ = [
    "BACKEND",
    "pairwise_l1",
    "pairwise_l1_pairs",
    "pairwise_l1_pairs_backward",
    "row_normalize",
    "row_normalize_backward",
]
