# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled batched net kernels.

Same contract as ``_kernels_py``: explicit typed loops keep per-call
overhead low for the tiny batches this package trains with.
"""

import numpy as np


cdef void _affine(double[:, ::1] a_prev, double[:, ::1] w, double[::1] b,
                  bint relu, double[:, ::1] z, double[:, ::1] a) noexcept nogil:
    cdef Py_ssize_t n = a_prev.shape[0]
    cdef Py_ssize_t d_in = a_prev.shape[1]
    cdef Py_ssize_t d_out = w.shape[0]
    cdef Py_ssize_t r, j, k
    cdef double s
    for r in range(n):
        for j in range(d_out):
            s = b[j]
            for k in range(d_in):
                s += a_prev[r, k] * w[j, k]
            z[r, j] = s
            if relu and s < 0.0:
                a[r, j] = 0.0
            else:
                a[r, j] = s


cdef void _layer_back(double[:, ::1] a_prev, double[:, ::1] z, double[:, ::1] w,
                      bint relu, double[:, ::1] da, double[:, ::1] dw,
                      double[::1] db, double[:, ::1] da_prev) noexcept nogil:
    cdef Py_ssize_t n = a_prev.shape[0]
    cdef Py_ssize_t d_in = a_prev.shape[1]
    cdef Py_ssize_t d_out = w.shape[0]
    cdef Py_ssize_t r, j, k
    cdef double g
    for j in range(d_out):
        db[j] = 0.0
        for k in range(d_in):
            dw[j, k] = 0.0
    for r in range(n):
        for k in range(d_in):
            da_prev[r, k] = 0.0
    for r in range(n):
        for j in range(d_out):
            g = da[r, j]
            if relu and z[r, j] <= 0.0:
                continue
            if g != 0.0:
                db[j] += g
                for k in range(d_in):
                    dw[j, k] += g * a_prev[r, k]
                    da_prev[r, k] += g * w[j, k]


def net_forward(x, weights, biases, relu_flags):
    """Run a stack of affine layers over a batch; see _kernels_py.net_forward."""
    n = x.shape[0]
    pre = []
    act = []
    a = x
    for w, b, relu in zip(weights, biases, relu_flags):
        z = np.empty((n, w.shape[0]))
        out = np.empty((n, w.shape[0]))
        _affine(a, w, b, relu, z, out)
        pre.append(z)
        act.append(out)
        a = out
    return pre, act


def net_backward(x, pre, act, weights, relu_flags, d_out, d_embed, embed_layer):
    """Backpropagate seed gradients; see _kernels_py.net_backward."""
    cdef Py_ssize_t n_layers = len(weights)
    d_ws = [None] * n_layers
    d_bs = [None] * n_layers
    da = d_out
    for i in range(n_layers - 1, -1, -1):
        w = weights[i]
        a_prev = x if i == 0 else act[i - 1]
        dw = np.empty_like(w)
        db = np.empty(w.shape[0])
        da_prev = np.empty_like(a_prev)
        _layer_back(a_prev, pre[i], w, relu_flags[i], da, dw, db, da_prev)
        d_ws[i] = dw
        d_bs[i] = db
        da = da_prev
        if d_embed is not None and i - 1 == embed_layer:
            da = da + d_embed
    return d_ws, d_bs, da
