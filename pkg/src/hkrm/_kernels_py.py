"""Pure numpy implementations of the pairwise kernels.

These are the fallback used when the compiled ``_kernels`` extension is not
built. Both backends must agree to within floating point reassociation.
"""

import numpy as np

BACKEND = "python"


def pairwise_l1(f):
    """Full N x N x D tensor of absolute feature differences."""
    f = np.ascontiguousarray(f, dtype=np.float64)
    return np.abs(f[:, None, :] - f[None, :, :])


def pairwise_l1_pairs(f, ii, jj):
    """Absolute differences for the listed pairs, shape (P, D)."""
    f = np.ascontiguousarray(f, dtype=np.float64)
    return np.abs(f[ii] - f[jj])


def pairwise_l1_pairs_backward(f, ii, jj, grad):
    """Gradient of sum(grad * |f[ii] - f[jj]|) with respect to f.

    The subgradient of |x| at 0 is taken as 0.
    """
    f = np.ascontiguousarray(f, dtype=np.float64)
    g = np.sign(f[ii] - f[jj]) * grad
    out = np.zeros_like(f)
    np.add.at(out, ii, g)
    np.add.at(out, jj, -g)
    return out


def _divide_rows(mat, denom):
    out = np.zeros_like(mat)
    np.divide(mat, denom[:, None], out=out, where=(denom > 0.0)[:, None])
    return out


def row_normalize(raw, eps):
    """Clamp at zero, then divide each row by (row sum + eps).

    Rows whose denominator is 0 (all-zero rows with eps = 0) stay zero.
    Returns the normalized matrix and the row sums of the clamped matrix.
    """
    clamped = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    sums = clamped.sum(axis=1)
    return _divide_rows(clamped, sums + eps), sums


def row_normalize_backward(raw, adj, sums, grad, eps):
    """Gradient of row_normalize with respect to the raw (pre-clamp) input."""
    inner = np.einsum("ij,ij->i", grad, adj)
    d_clamped = _divide_rows(grad - inner[:, None], sums + eps)
    return np.where(np.asarray(raw) > 0.0, d_clamped, 0.0)
