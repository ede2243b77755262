"""Sequence kernels with a compiled core and a numpy fallback.

The backend is chosen once at import: the Cython extension when it built,
numpy otherwise. Set FEDPROG_PURE=1 to force the numpy path. Everything
around the recurrent loops (input projection, weight-gradient assembly) is
plain BLAS and shared between backends.
"""

import os

import numpy as np

from . import pure as _pure

if os.environ.get("FEDPROG_PURE", "") not in ("", "0"):
    _impl = _pure
    BACKEND = "pure"
else:
    try:
        from . import _core as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _pure
        BACKEND = "pure"


def sequence_forward(w_ih, w_hh, b_ih, b_hh, x):
    """Full-sequence LSTM forward over a batch.

    x: (B, T, D) float64. Returns time-major caches (gates, z_seq, h_seq);
    h_seq[-1] is the final hidden state for every batch element.
    """
    batch, t_len, d_in = x.shape
    bias = b_ih + b_hh
    pre = x.reshape(batch * t_len, d_in) @ w_ih.T
    pre += bias
    pre = np.ascontiguousarray(pre.reshape(batch, t_len, -1).transpose(1, 0, 2))
    w_hh_t = np.ascontiguousarray(w_hh.T)
    return _impl.recurrent_forward(pre, w_hh_t)


def sequence_backward(w_hh, x, gates, z_seq, h_seq, dh_last):
    """Gradients of the LSTM layer given forward caches.

    Returns (d_w_ih, d_w_hh, d_bias); b_ih and b_hh share d_bias because the
    forward pass only ever sees their sum.
    """
    dpre = _impl.recurrent_backward(gates, z_seq, np.ascontiguousarray(w_hh), dh_last)
    t_len, batch, g4 = dpre.shape
    size = g4 // 4
    flat = dpre.reshape(t_len * batch, g4)
    x_tm = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(t_len * batch, -1)
    d_w_ih = flat.T @ x_tm
    h_prev = np.concatenate([np.zeros((1, batch, size)), h_seq[:-1]], axis=0)
    d_w_hh = flat.T @ h_prev.reshape(t_len * batch, size)
    d_bias = flat.sum(axis=0)
    return d_w_ih, d_w_hh, d_bias
