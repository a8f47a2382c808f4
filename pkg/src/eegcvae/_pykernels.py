"""Pure numpy versions of the compiled kernels in ``_ckernels``."""

import numpy as np


def sosfilt(sos, x):
    """Cascade of direct-form II transposed biquads along the last axis."""
    y = np.array(x, dtype=np.float64, copy=True)
    n = y.shape[1]
    for b0, b1, b2, _, a1, a2 in np.asarray(sos, dtype=np.float64):
        z1 = np.zeros(y.shape[0])
        z2 = np.zeros(y.shape[0])
        for t in range(n):
            xi = y[:, t].copy()
            yi = b0 * xi + z1
            z1 = b1 * xi - a1 * yi + z2
            z2 = b2 * xi - a2 * yi
            y[:, t] = yi
    return y


def corr2d(x, w):
    """out[b,o,h,v] = sum_{i,p,q} x[b,i,h+p,v+q] * w[o,i,p,q]."""
    nb, _, xh, xw = x.shape
    no, _, kh, kw = w.shape
    oh, ow = xh - kh + 1, xw - kw + 1
    out = np.zeros((nb, no, oh, ow), dtype=x.dtype)
    for p in range(kh):
        for q in range(kw):
            out += np.einsum("oi,bihv->bohv", w[:, :, p, q], x[:, :, p:p + oh, q:q + ow])
    return out


def corr2d_grad_input(dy, w, in_h, in_w):
    """Adjoint of ``corr2d`` with respect to its input (a transposed convolution)."""
    nb, _, oh, ow = dy.shape
    _, ni, kh, kw = w.shape
    dx = np.zeros((nb, ni, in_h, in_w), dtype=dy.dtype)
    for p in range(kh):
        for q in range(kw):
            dx[:, :, p:p + oh, q:q + ow] += np.einsum("oi,bohv->bihv", w[:, :, p, q], dy)
    return dx


def corr2d_grad_weight(x, dy, kh, kw):
    """Gradient of ``corr2d`` with respect to its kernel."""
    _, ni, _, _ = x.shape
    _, no, oh, ow = dy.shape
    dw = np.zeros((no, ni, kh, kw), dtype=dy.dtype)
    for p in range(kh):
        for q in range(kw):
            dw[:, :, p, q] = np.einsum("bihv,bohv->oi", x[:, :, p:p + oh, q:q + ow], dy)
    return dw
