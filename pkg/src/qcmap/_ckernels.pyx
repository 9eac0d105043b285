# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_pykernels`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline void _weights(double u, double* w, double* dw) noexcept nogil:
    cdef double v = 1.0 - u
    cdef double u2 = u * u
    cdef double u3 = u2 * u
    w[0] = v * v * v / 6.0
    w[1] = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0
    w[2] = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0
    w[3] = u3 / 6.0
    dw[0] = -0.5 * v * v
    dw[1] = 1.5 * u2 - 2.0 * u
    dw[2] = -1.5 * u2 + u + 0.5
    dw[3] = 0.5 * u2


cdef inline Py_ssize_t _base(double t, Py_ssize_t L) noexcept nogil:
    cdef Py_ssize_t i = <Py_ssize_t>floor(t)
    if i < 0:
        i = 0
    if i > L - 2:
        i = L - 2
    return i


def _eval2(const double[:, ::1] coef, const double[:, ::1] t,
           double[::1] val, double[:, ::1] grad):
    cdef Py_ssize_t k, a, b, i0, i1
    cdef Py_ssize_t L0 = coef.shape[0] - 2, L1 = coef.shape[1] - 2
    cdef double w0[4]
    cdef double d0[4]
    cdef double w1[4]
    cdef double d1[4]
    cdef double c, s, g0, g1, rs, rg
    with nogil:
        for k in range(t.shape[0]):
            i0 = _base(t[k, 0], L0)
            i1 = _base(t[k, 1], L1)
            _weights(t[k, 0] - i0, w0, d0)
            _weights(t[k, 1] - i1, w1, d1)
            s = 0.0
            g0 = 0.0
            g1 = 0.0
            for a in range(4):
                rs = 0.0
                rg = 0.0
                for b in range(4):
                    c = coef[i0 + a, i1 + b]
                    rs = rs + c * w1[b]
                    rg = rg + c * d1[b]
                s = s + w0[a] * rs
                g0 = g0 + d0[a] * rs
                g1 = g1 + w0[a] * rg
            val[k] = s
            grad[k, 0] = g0
            grad[k, 1] = g1


def _eval3(const double[:, :, ::1] coef, const double[:, ::1] t,
           double[::1] val, double[:, ::1] grad):
    cdef Py_ssize_t k, a, b, e, i0, i1, i2
    cdef Py_ssize_t L0 = coef.shape[0] - 2, L1 = coef.shape[1] - 2, L2 = coef.shape[2] - 2
    cdef double w0[4]
    cdef double d0[4]
    cdef double w1[4]
    cdef double d1[4]
    cdef double w2[4]
    cdef double d2[4]
    cdef double c, s, g0, g1, g2, ps, pg1, pg2, qs, qg
    with nogil:
        for k in range(t.shape[0]):
            i0 = _base(t[k, 0], L0)
            i1 = _base(t[k, 1], L1)
            i2 = _base(t[k, 2], L2)
            _weights(t[k, 0] - i0, w0, d0)
            _weights(t[k, 1] - i1, w1, d1)
            _weights(t[k, 2] - i2, w2, d2)
            s = 0.0
            g0 = 0.0
            g1 = 0.0
            g2 = 0.0
            for a in range(4):
                ps = 0.0
                pg1 = 0.0
                pg2 = 0.0
                for b in range(4):
                    qs = 0.0
                    qg = 0.0
                    for e in range(4):
                        c = coef[i0 + a, i1 + b, i2 + e]
                        qs = qs + c * w2[e]
                        qg = qg + c * d2[e]
                    ps = ps + w1[b] * qs
                    pg1 = pg1 + d1[b] * qs
                    pg2 = pg2 + w1[b] * qg
                s = s + w0[a] * ps
                g0 = g0 + d0[a] * ps
                g1 = g1 + w0[a] * pg1
                g2 = g2 + w0[a] * pg2
            val[k] = s
            grad[k, 0] = g0
            grad[k, 1] = g1
            grad[k, 2] = g2


def bspline_eval(coef, t):
    coef = np.ascontiguousarray(coef, dtype=np.float64)
    t = np.ascontiguousarray(t, dtype=np.float64)
    k, n = t.shape[0], t.shape[1]
    val = np.empty(k)
    grad = np.empty((k, n))
    if n == 2:
        _eval2(coef, t, val, grad)
    elif n == 3:
        _eval3(coef, t, val, grad)
    else:
        raise ValueError(f"bspline_eval supports n=2,3, got {n}")
    return val, grad


def _accumulate(const double[:, ::1] vecs, const double[::1] weights,
                const cnp.int32_t[:, :, ::1] scatter, double[::1] out):
    cdef Py_ssize_t k, a, b, L = vecs.shape[1]
    cdef double wa
    with nogil:
        for k in range(vecs.shape[0]):
            for a in range(L):
                wa = weights[k] * vecs[k, a]
                if wa == 0.0:
                    continue
                for b in range(L):
                    out[scatter[k, a, b]] += wa * vecs[k, b]


def accumulate_outer(vecs, weights, scatter, out):
    _accumulate(np.ascontiguousarray(vecs, dtype=np.float64),
                np.ascontiguousarray(weights, dtype=np.float64),
                np.ascontiguousarray(scatter, dtype=np.int32), out)
    return out


cdef void _jac_generic(const double* Yc, const double* G, double* F,
                       Py_ssize_t nc, Py_ssize_t ns, Py_ssize_t n, Py_ssize_t nk) noexcept nogil:
    cdef Py_ssize_t c, t, i, j, k
    cdef double s
    for c in range(nc):
        for t in range(ns):
            for i in range(n):
                for j in range(n):
                    s = 0.0
                    for k in range(nk):
                        s = s + Yc[(c * n + i) * nk + k] * G[(t * nk + k) * n + j]
                    F[((c * ns + t) * n + i) * n + j] = s


cdef void _jac2(const double* Yc, const double* G, double* F, Py_ssize_t nc) noexcept nogil:
    cdef Py_ssize_t c
    cdef int t, i, j, k
    cdef double s
    cdef const double* y
    cdef double* f
    for c in range(nc):
        y = Yc + c * 8
        f = F + c * 8
        for t in range(2):
            for i in range(2):
                for j in range(2):
                    s = 0.0
                    for k in range(4):
                        s = s + y[i * 4 + k] * G[t * 8 + k * 2 + j]
                    f[t * 4 + i * 2 + j] = s


def _jac(const double[:, :, ::1] Yc, const double[:, :, ::1] G, double[:, :, :, ::1] F):
    cdef Py_ssize_t nc = Yc.shape[0], n = Yc.shape[1], nk = Yc.shape[2], ns = G.shape[0]
    if nc == 0:
        return
    with nogil:
        if n == 2 and nk == 4 and ns == 2:
            _jac2(&Yc[0, 0, 0], &G[0, 0, 0], &F[0, 0, 0, 0], nc)
        else:
            _jac_generic(&Yc[0, 0, 0], &G[0, 0, 0], &F[0, 0, 0, 0], nc, ns, n, nk)


def element_jacobians(Yc, cell_grad):
    Yc = np.ascontiguousarray(Yc, dtype=np.float64)
    G = np.ascontiguousarray(cell_grad, dtype=np.float64)
    if Yc.shape[1] > 2:
        # with 3x8 blocks a BLAS contraction beats the scalar loop
        return np.einsum("cik,tkj->ctij", Yc, G, optimize=True)
    F = np.empty((Yc.shape[0], G.shape[0], Yc.shape[1], G.shape[2]))
    _jac(Yc, G, F)
    return F
