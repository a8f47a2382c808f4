# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: SOS cascade filtering and valid 2-D cross-correlation.

Every function mirrors one in ``_pykernels`` and returns a freshly allocated
array of the input dtype.
"""
import numpy as np

ctypedef fused real:
    float
    double


def sosfilt(const double[:, ::1] sos, const double[:, ::1] x):
    """Cascade of direct-form II transposed biquads along the last axis."""
    cdef Py_ssize_t n_sec = sos.shape[0], n_ch = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t s, c, t
    cdef double b0, b1, b2, a1, a2, z1, z2, xi, yi
    out = np.array(x, dtype=np.float64, copy=True)
    cdef double[:, ::1] y = out
    with nogil:
        for s in range(n_sec):
            b0 = sos[s, 0]; b1 = sos[s, 1]; b2 = sos[s, 2]
            a1 = sos[s, 4]; a2 = sos[s, 5]
            for c in range(n_ch):
                z1 = 0.0
                z2 = 0.0
                for t in range(n):
                    xi = y[c, t]
                    yi = b0 * xi + z1
                    z1 = b1 * xi - a1 * yi + z2
                    z2 = b2 * xi - a2 * yi
                    y[c, t] = yi
    return out


def corr2d(const real[:, :, :, ::1] x, const real[:, :, :, ::1] w):
    """out[b,o,h,v] = sum_{i,p,q} x[b,i,h+p,v+q] * w[o,i,p,q]."""
    cdef Py_ssize_t nb = x.shape[0], ni = x.shape[1]
    cdef Py_ssize_t no = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = x.shape[2] - kh + 1, ow = x.shape[3] - kw + 1
    cdef Py_ssize_t b, o, i, p, q, h, v
    cdef real wt
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((nb, no, oh, ow), dtype=dtype)
    cdef real[:, :, :, ::1] y = out
    with nogil:
        for b in range(nb):
            for o in range(no):
                for i in range(ni):
                    for p in range(kh):
                        for q in range(kw):
                            wt = w[o, i, p, q]
                            for h in range(oh):
                                for v in range(ow):
                                    y[b, o, h, v] += wt * x[b, i, h + p, v + q]
    return out


def corr2d_grad_input(const real[:, :, :, ::1] dy, const real[:, :, :, ::1] w, Py_ssize_t in_h, Py_ssize_t in_w):
    """Adjoint of ``corr2d`` with respect to its input (a transposed convolution)."""
    cdef Py_ssize_t nb = dy.shape[0], no = dy.shape[1], oh = dy.shape[2], ow = dy.shape[3]
    cdef Py_ssize_t ni = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t b, o, i, p, q, h, v
    cdef real wt
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((nb, ni, in_h, in_w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    with nogil:
        for b in range(nb):
            for i in range(ni):
                for o in range(no):
                    for p in range(kh):
                        for q in range(kw):
                            wt = w[o, i, p, q]
                            for h in range(oh):
                                for v in range(ow):
                                    dx[b, i, h + p, v + q] += wt * dy[b, o, h, v]
    return out


def corr2d_grad_weight(const real[:, :, :, ::1] x, const real[:, :, :, ::1] dy, Py_ssize_t kh, Py_ssize_t kw):
    """Gradient of ``corr2d`` with respect to its kernel."""
    cdef Py_ssize_t nb = x.shape[0], ni = x.shape[1]
    cdef Py_ssize_t no = dy.shape[1], oh = dy.shape[2], ow = dy.shape[3]
    cdef Py_ssize_t b, o, i, p, q, h, v, ow4 = ow - ow % 4
    cdef double acc, a0, a1, a2, a3
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((no, ni, kh, kw), dtype=dtype)
    cdef real[:, :, :, ::1] dw = out
    with nogil:
        for o in range(no):
            for i in range(ni):
                for p in range(kh):
                    for q in range(kw):
                        a0 = 0; a1 = 0; a2 = 0; a3 = 0
                        for b in range(nb):
                            for h in range(oh):
                                for v in range(0, ow4, 4):
                                    a0 = a0 + x[b, i, h + p, v + q] * dy[b, o, h, v]
                                    a1 = a1 + x[b, i, h + p, v + q + 1] * dy[b, o, h, v + 1]
                                    a2 = a2 + x[b, i, h + p, v + q + 2] * dy[b, o, h, v + 2]
                                    a3 = a3 + x[b, i, h + p, v + q + 3] * dy[b, o, h, v + 3]
                                for v in range(ow4, ow):
                                    a0 = a0 + x[b, i, h + p, v + q] * dy[b, o, h, v]
                        acc = (a0 + a1) + (a2 + a3)
                        dw[o, i, p, q] = <real>acc
    return out
