# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled recurrent LSTM loops; contract identical to kernels.pure."""

import numpy as np

from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemm


cdef inline double _sig(double v) noexcept nogil:
    return 1.0 / (1.0 + exp(-v))


def recurrent_forward(double[:, :, ::1] pre, double[:, ::1] w_hh_t):
    """See kernels.pure.recurrent_forward; pre is consumed in place."""
    cdef Py_ssize_t t_len = pre.shape[0]
    cdef Py_ssize_t batch = pre.shape[1]
    cdef Py_ssize_t g4 = pre.shape[2]
    cdef Py_ssize_t size = g4 // 4
    z_seq_arr = np.empty((t_len, batch, size))
    h_seq_arr = np.empty((t_len, batch, size))
    h_arr = np.zeros((batch, size))
    z_arr = np.zeros((batch, size))
    cdef double[:, :, ::1] z_seq = z_seq_arr
    cdef double[:, :, ::1] h_seq = h_seq_arr
    cdef double[:, ::1] h = h_arr
    cdef double[:, ::1] z = z_arr

    # dgemm on row-major buffers via the transposed col-major view:
    # pre[t] (B,G) += h (B,L) @ w_hh_t (L,G)  ==  pre[t]^T = w_hh_t^T @ h^T
    cdef int m = <int> g4
    cdef int n = <int> batch
    cdef int k = <int> size
    cdef double one = 1.0
    cdef char no = b'N'
    cdef Py_ssize_t t, b, u
    cdef double gi, gf, gg, go, zz

    with nogil:
        for t in range(t_len):
            if t > 0:
                dgemm(&no, &no, &m, &n, &k, &one, &w_hh_t[0, 0], &m,
                      &h[0, 0], &k, &one, &pre[t, 0, 0], &m)
            for b in range(batch):
                for u in range(size):
                    gi = _sig(pre[t, b, u])
                    gf = _sig(pre[t, b, size + u])
                    gg = tanh(pre[t, b, 2 * size + u])
                    go = _sig(pre[t, b, 3 * size + u])
                    pre[t, b, u] = gi
                    pre[t, b, size + u] = gf
                    pre[t, b, 2 * size + u] = gg
                    pre[t, b, 3 * size + u] = go
                    zz = gf * z[b, u] + gi * gg
                    z[b, u] = zz
                    z_seq[t, b, u] = zz
                    h[b, u] = go * tanh(zz)
                    h_seq[t, b, u] = h[b, u]
    return np.asarray(pre), z_seq_arr, h_seq_arr


def recurrent_backward(double[:, :, ::1] gates, double[:, :, ::1] z_seq,
                       double[:, ::1] w_hh, double[:, ::1] dh_last):
    """See kernels.pure.recurrent_backward."""
    cdef Py_ssize_t t_len = gates.shape[0]
    cdef Py_ssize_t batch = gates.shape[1]
    cdef Py_ssize_t g4 = gates.shape[2]
    cdef Py_ssize_t size = g4 // 4
    dpre_arr = np.empty((t_len, batch, g4))
    dh_arr = np.array(dh_last, copy=True)
    dz_arr = np.zeros((batch, size))
    cdef double[:, :, ::1] dpre = dpre_arr
    cdef double[:, ::1] dh = dh_arr
    cdef double[:, ::1] dz = dz_arr

    # dh (B,L) = dpre[t] (B,G) @ w_hh (G,L)  ==  dh^T = w_hh^T @ dpre[t]^T
    cdef int m = <int> size
    cdef int n = <int> batch
    cdef int k = <int> g4
    cdef double one = 1.0
    cdef double zero = 0.0
    cdef char no = b'N'
    cdef Py_ssize_t t, b, u
    cdef double gi, gf, gg, go, tz, dzv, zprev

    with nogil:
        for t in range(t_len - 1, -1, -1):
            for b in range(batch):
                for u in range(size):
                    gi = gates[t, b, u]
                    gf = gates[t, b, size + u]
                    gg = gates[t, b, 2 * size + u]
                    go = gates[t, b, 3 * size + u]
                    tz = tanh(z_seq[t, b, u])
                    dzv = dz[b, u] + dh[b, u] * go * (1.0 - tz * tz)
                    zprev = z_seq[t - 1, b, u] if t > 0 else 0.0
                    dpre[t, b, u] = (dzv * gg) * gi * (1.0 - gi)
                    dpre[t, b, size + u] = (dzv * zprev) * gf * (1.0 - gf)
                    dpre[t, b, 2 * size + u] = (dzv * gi) * (1.0 - gg * gg)
                    dpre[t, b, 3 * size + u] = (dh[b, u] * tz) * go * (1.0 - go)
                    dz[b, u] = dzv * gf
            dgemm(&no, &no, &m, &n, &k, &one, &w_hh[0, 0], &m,
                  &dpre[t, 0, 0], &k, &zero, &dh[0, 0], &m)
    return dpre_arr
