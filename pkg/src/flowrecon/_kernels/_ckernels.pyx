# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for convolution unfolding and parallel-beam tomography.

Every function here has a NumPy twin in ``_fallback.py`` with the same
signature; the package picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] x, real[:, :, ::1] out, int k, int stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int pad = k // 2
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    cdef Py_ssize_t b, c, ky, kx, oy, ox, iy, ix, row
    for b in range(B):
        for c in range(C):
            for ky in range(k):
                for kx in range(k):
                    row = (c * k + ky) * k + kx
                    for oy in range(Ho):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= H:
                            for ox in range(Wo):
                                out[b, row, oy * Wo + ox] = 0
                            continue
                        for ox in range(Wo):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= W:
                                out[b, row, oy * Wo + ox] = 0
                            else:
                                out[b, row, oy * Wo + ox] = x[b, c, iy, ix]


def im2col(x, int k, int stride):
    x = np.ascontiguousarray(x)
    B, C, H, W = x.shape
    pad = k // 2
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.empty((B, C * k * k, Ho * Wo), dtype=x.dtype)
    _im2col(x, out, k, stride)
    return out


def _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] out, int k, int stride):
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef int pad = k // 2
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    cdef Py_ssize_t b, c, ky, kx, oy, ox, iy, ix, row
    for b in range(B):
        for c in range(C):
            for ky in range(k):
                for kx in range(k):
                    row = (c * k + ky) * k + kx
                    for oy in range(Ho):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= H:
                            continue
                        for ox in range(Wo):
                            ix = ox * stride + kx - pad
                            if ix >= 0 and ix < W:
                                out[b, c, iy, ix] += cols[b, row, oy * Wo + ox]


def col2im(cols, shape, int k, int stride):
    cols = np.ascontiguousarray(cols)
    out = np.zeros(shape, dtype=cols.dtype)
    _col2im(cols, out, k, stride)
    return out


cdef inline void _bilinear_weights(double fi, double fj, Py_ssize_t H, Py_ssize_t W,
                                   Py_ssize_t* idx, double* wts) nogil:
    # four taps; out-of-image taps get weight 0 and index 0
    cdef Py_ssize_t i0 = <Py_ssize_t>floor(fi)
    cdef Py_ssize_t j0 = <Py_ssize_t>floor(fj)
    cdef double di = fi - i0, dj = fj - j0
    cdef Py_ssize_t n, ii, jj
    cdef double w
    for n in range(4):
        ii = i0 + (n >> 1)
        jj = j0 + (n & 1)
        w = (di if (n >> 1) else 1.0 - di) * (dj if (n & 1) else 1.0 - dj)
        if ii < 0 or ii >= H or jj < 0 or jj >= W:
            idx[n] = 0
            wts[n] = 0.0
        else:
            idx[n] = ii * W + jj
            wts[n] = w


def radon_project(double[:, :, ::1] img, double[::1] cos_a, double[::1] sin_a,
                  double[::1] det, double[::1] ts, double step):
    cdef Py_ssize_t B = img.shape[0], H = img.shape[1], W = img.shape[2]
    cdef Py_ssize_t A = cos_a.shape[0], D = det.shape[0], T = ts.shape[0]
    out_arr = np.zeros((B, A, D), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] flat = np.asarray(img).reshape(B, H * W)
    cdef double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0
    cdef Py_ssize_t a, d, t, b, n
    cdef double u, v, acc
    cdef Py_ssize_t idx[4]
    cdef double wts[4]
    with nogil:
        for a in range(A):
            for d in range(D):
                for t in range(T):
                    u = det[d] * cos_a[a] + ts[t] * sin_a[a]
                    v = -det[d] * sin_a[a] + ts[t] * cos_a[a]
                    _bilinear_weights(cy - v, u + cx, H, W, idx, wts)
                    for b in range(B):
                        acc = 0.0
                        for n in range(4):
                            acc = acc + wts[n] * flat[b, idx[n]]
                        out[b, a, d] += acc * step
    return out_arr


def radon_backproject(double[:, :, ::1] sino, double[::1] cos_a, double[::1] sin_a,
                      double[::1] det, double[::1] ts, double step, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t B = sino.shape[0], A = cos_a.shape[0], D = det.shape[0], T = ts.shape[0]
    out_arr = np.zeros((B, H * W), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0
    cdef Py_ssize_t a, d, t, b, n
    cdef double u, v, val
    cdef Py_ssize_t idx[4]
    cdef double wts[4]
    with nogil:
        for a in range(A):
            for d in range(D):
                for t in range(T):
                    u = det[d] * cos_a[a] + ts[t] * sin_a[a]
                    v = -det[d] * sin_a[a] + ts[t] * cos_a[a]
                    _bilinear_weights(cy - v, u + cx, H, W, idx, wts)
                    for b in range(B):
                        val = sino[b, a, d] * step
                        for n in range(4):
                            out[b, idx[n]] += wts[n] * val
    return out_arr.reshape(B, H, W)


def fbp_backproject(double[:, :, ::1] filt, double[::1] cos_a, double[::1] sin_a,
                    double det0, double spacing, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t B = filt.shape[0], A = filt.shape[1], D = filt.shape[2]
    out_arr = np.zeros((B, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0
    cdef Py_ssize_t a, i, j, b, k0
    cdef double u, v, s, f, w
    with nogil:
        for a in range(A):
            for i in range(H):
                v = cy - i
                for j in range(W):
                    u = j - cx
                    s = (u * cos_a[a] - v * sin_a[a] - det0) / spacing
                    k0 = <Py_ssize_t>floor(s)
                    f = s - k0
                    for b in range(B):
                        w = 0.0
                        if k0 >= 0 and k0 < D:
                            w = w + (1.0 - f) * filt[b, a, k0]
                        if k0 + 1 >= 0 and k0 + 1 < D:
                            w = w + f * filt[b, a, k0 + 1]
                        out[b, i, j] += w
    return out_arr
