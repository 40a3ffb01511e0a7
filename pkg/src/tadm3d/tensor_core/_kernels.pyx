# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch-extraction kernels for conv3d (same layout as _fallback).

Each patch column maps to a fixed offset into the padded input, so both
kernels reduce to a gather (or scatter-add) through one offset table.
"""

import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


cdef void _im2col(const real* x, real* out, const Py_ssize_t* offs, Py_ssize_t K,
                  Py_ssize_t N, Py_ssize_t sample_stride, int s, int Do, int Ho, int Wo,
                  Py_ssize_t Hp, Py_ssize_t Wp) noexcept nogil:
    cdef Py_ssize_t n, d, h, w, j, base
    cdef real* row = out
    for n in range(N):
        for d in range(Do):
            for h in range(Ho):
                base = n * sample_stride + (s * d * Hp + s * h) * Wp
                for w in range(Wo):
                    for j in range(K):
                        row[j] = x[base + offs[j]]
                    row += K
                    base += s


cdef void _col2im(const real* p, real* dx, const Py_ssize_t* offs, Py_ssize_t K,
                  Py_ssize_t N, Py_ssize_t sample_stride, int s, int Do, int Ho, int Wo,
                  Py_ssize_t Hp, Py_ssize_t Wp) noexcept nogil:
    cdef Py_ssize_t n, d, h, w, j, base
    cdef const real* row = p
    for n in range(N):
        for d in range(Do):
            for h in range(Ho):
                base = n * sample_stride + (s * d * Hp + s * h) * Wp
                for w in range(Wo):
                    for j in range(K):
                        dx[base + offs[j]] += row[j]
                    row += K
                    base += s


def _offsets(C, k, Dp, Hp, Wp):
    c, a, b, e = np.meshgrid(np.arange(C), np.arange(k), np.arange(k), np.arange(k), indexing="ij")
    return np.ascontiguousarray(((c * Dp + a) * Hp + b) * Wp + e, dtype=np.intp).ravel()


def im2col3d(xp, int k, int stride, out_shape):
    cdef int Do = out_shape[0], Ho = out_shape[1], Wo = out_shape[2]
    xp = np.ascontiguousarray(xp)
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1], Dp = xp.shape[2], Hp = xp.shape[3], Wp = xp.shape[4]
    cdef cnp.intp_t[::1] offs = _offsets(C, k, Dp, Hp, Wp)
    cdef Py_ssize_t K = C * k * k * k
    out = np.empty((N * Do * Ho * Wo, K), dtype=xp.dtype)
    cdef float[::1] xf, of
    cdef double[::1] xd, od
    if xp.dtype == np.float32:
        xf = xp.reshape(-1)
        of = out.reshape(-1)
        with nogil:
            _im2col[float](&xf[0], &of[0], <const Py_ssize_t*>&offs[0], K, N, C * Dp * Hp * Wp, stride, Do, Ho, Wo, Hp, Wp)
    elif xp.dtype == np.float64:
        xd = xp.reshape(-1)
        od = out.reshape(-1)
        with nogil:
            _im2col[double](&xd[0], &od[0], <const Py_ssize_t*>&offs[0], K, N, C * Dp * Hp * Wp, stride, Do, Ho, Wo, Hp, Wp)
    else:
        raise TypeError(f"unsupported dtype {xp.dtype}")
    return out


def col2im3d(patches, x_shape, int k, int stride, out_shape):
    cdef int Do = out_shape[0], Ho = out_shape[1], Wo = out_shape[2]
    patches = np.ascontiguousarray(patches)
    cdef Py_ssize_t N = x_shape[0], C = x_shape[1], Dp = x_shape[2], Hp = x_shape[3], Wp = x_shape[4]
    cdef cnp.intp_t[::1] offs = _offsets(C, k, Dp, Hp, Wp)
    cdef Py_ssize_t K = C * k * k * k
    dx = np.zeros(tuple(x_shape), dtype=patches.dtype)
    cdef float[::1] pf, df
    cdef double[::1] pd, dd
    if patches.dtype == np.float32:
        pf = patches.reshape(-1)
        df = dx.reshape(-1)
        with nogil:
            _col2im[float](&pf[0], &df[0], <const Py_ssize_t*>&offs[0], K, N, C * Dp * Hp * Wp, stride, Do, Ho, Wo, Hp, Wp)
    elif patches.dtype == np.float64:
        pd = patches.reshape(-1)
        dd = dx.reshape(-1)
        with nogil:
            _col2im[double](&pd[0], &dd[0], <const Py_ssize_t*>&offs[0], K, N, C * Dp * Hp * Wp, stride, Do, Ho, Wo, Hp, Wp)
    else:
        raise TypeError(f"unsupported dtype {patches.dtype}")
    return dx
