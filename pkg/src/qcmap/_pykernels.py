"""NumPy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` one for one and are used when the compiled
module is unavailable or ``QCMAP_PURE_PYTHON=1`` is set.
"""
import numpy as np


def bspline_weights(u):
    """Cubic B-spline weights and their derivatives for offsets ``u`` in [0, 1]."""
    v = 1.0 - u
    u2 = u * u
    u3 = u2 * u
    w = np.stack([v**3 / 6.0,
                  (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
                  (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
                  u3 / 6.0], axis=-1)
    dw = np.stack([-0.5 * v * v,
                   1.5 * u2 - 2.0 * u,
                   -1.5 * u2 + u + 0.5,
                   0.5 * u2], axis=-1)
    return w, dw


def bspline_eval(coef, t):
    """Evaluate a padded coefficient array at continuous sample indices.

    Parameters
    ----------
    coef : ndarray
        Coefficients padded by one sample on each side of every axis.
    t : ndarray, shape (k, n)
        Sample-index coordinates, already clamped to ``[0, L-1]``.

    Returns
    -------
    values : ndarray, shape (k,)
    grad : ndarray, shape (k, n)
        Derivatives with respect to the sample-index coordinates.
    """
    coef = np.asarray(coef, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    k, n = t.shape
    base = []
    ws = []
    dws = []
    for j in range(n):
        L = coef.shape[j] - 2
        i = np.clip(np.floor(t[:, j]), 0, L - 2).astype(np.int64)
        w, dw = bspline_weights(t[:, j] - i)
        base.append(i)
        ws.append(w)
        dws.append(dw)
    values = np.zeros(k)
    grad = np.zeros((k, n))
    offs = np.arange(4)
    if n == 2:
        i0 = base[0][:, None, None] + offs[None, :, None]
        i1 = base[1][:, None, None] + offs[None, None, :]
        c = coef[i0, i1]
        values = np.einsum("kab,ka,kb->k", c, ws[0], ws[1])
        grad[:, 0] = np.einsum("kab,ka,kb->k", c, dws[0], ws[1])
        grad[:, 1] = np.einsum("kab,ka,kb->k", c, ws[0], dws[1])
    elif n == 3:
        i0 = base[0][:, None, None, None] + offs[None, :, None, None]
        i1 = base[1][:, None, None, None] + offs[None, None, :, None]
        i2 = base[2][:, None, None, None] + offs[None, None, None, :]
        c = coef[i0, i1, i2]
        values = np.einsum("kabc,ka,kb,kc->k", c, ws[0], ws[1], ws[2])
        grad[:, 0] = np.einsum("kabc,ka,kb,kc->k", c, dws[0], ws[1], ws[2])
        grad[:, 1] = np.einsum("kabc,ka,kb,kc->k", c, ws[0], dws[1], ws[2])
        grad[:, 2] = np.einsum("kabc,ka,kb,kc->k", c, ws[0], ws[1], dws[2])
    else:
        raise ValueError(f"bspline_eval supports n=2,3, got {n}")
    return values, grad


def accumulate_outer(vecs, weights, scatter, out):
    """``out[scatter[k, a, b]] += weights[k] * vecs[k, a] * vecs[k, b]``."""
    vecs = np.asarray(vecs, dtype=np.float64)
    local = (np.asarray(weights, dtype=np.float64)[:, None, None]
             * vecs[:, :, None] * vecs[:, None, :])
    out += np.bincount(np.asarray(scatter).ravel(), weights=local.ravel(),
                       minlength=out.size)
    return out


def element_jacobians(Yc, cell_grad):
    """Per-element Jacobians from cell-corner values.

    ``Yc`` has shape ``(cells, n, 2**n)`` and ``cell_grad`` shape
    ``(n!, 2**n, n)``; the result has shape ``(cells, n!, n, n)``.
    """
    return np.einsum("cik,tkj->ctij", Yc, cell_grad, optimize=True)
