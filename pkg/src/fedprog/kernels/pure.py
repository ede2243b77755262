"""Reference numpy implementation of the recurrent LSTM loops.

The time dimension is inherently sequential, so these loops are the hot path
of every experiment. The compiled backend (_core) implements the identical
contract; this module is the fallback and the correctness reference.
"""

import numpy as np


def _sigmoid_inplace(a: np.ndarray) -> None:
    np.negative(a, out=a)
    np.exp(a, out=a)
    a += 1.0
    np.reciprocal(a, out=a)


def recurrent_forward(pre, w_hh_t):
    """Run the gate recursion over a pre-projected input sequence.

    pre: (T, B, 4L) float64, x @ w_ih.T + b_ih + b_hh, consumed in place.
    w_hh_t: (L, 4L) float64, transposed hidden-hidden weights.

    Returns (gates, z_seq, h_seq), all time-major. `gates` holds the
    post-activation gate values in order [input, forget, cell, output] and
    aliases the `pre` buffer.
    """
    t_len, batch, g4 = pre.shape
    size = g4 // 4
    z_seq = np.empty((t_len, batch, size))
    h_seq = np.empty((t_len, batch, size))
    h = np.zeros((batch, size))
    z = np.zeros((batch, size))
    for t in range(t_len):
        p = pre[t]
        p += h @ w_hh_t
        _sigmoid_inplace(p[:, :size])
        _sigmoid_inplace(p[:, size:2 * size])
        np.tanh(p[:, 2 * size:3 * size], out=p[:, 2 * size:3 * size])
        _sigmoid_inplace(p[:, 3 * size:])
        z = p[:, size:2 * size] * z + p[:, :size] * p[:, 2 * size:3 * size]
        h = p[:, 3 * size:] * np.tanh(z)
        z_seq[t] = z
        h_seq[t] = h
    return pre, z_seq, h_seq


def recurrent_backward(gates, z_seq, w_hh, dh_last):
    """Backpropagate through the gate recursion.

    gates, z_seq: caches from recurrent_forward, time-major.
    w_hh: (4L, L) hidden-hidden weights.
    dh_last: (B, L) gradient w.r.t. the final hidden state.

    Returns dpre (T, B, 4L): gradients w.r.t. the pre-activation gate inputs.
    """
    t_len, batch, g4 = gates.shape
    size = g4 // 4
    dpre = np.empty_like(gates)
    dh = dh_last
    dz = np.zeros((batch, size))
    for t in range(t_len - 1, -1, -1):
        gi = gates[t, :, :size]
        gf = gates[t, :, size:2 * size]
        gg = gates[t, :, 2 * size:3 * size]
        go = gates[t, :, 3 * size:]
        tz = np.tanh(z_seq[t])
        dz = dz + dh * go * (1.0 - tz * tz)
        z_prev = z_seq[t - 1] if t > 0 else 0.0
        out = dpre[t]
        out[:, :size] = (dz * gg) * gi * (1.0 - gi)
        out[:, size:2 * size] = (dz * z_prev) * gf * (1.0 - gf)
        out[:, 2 * size:3 * size] = (dz * gi) * (1.0 - gg * gg)
        out[:, 3 * size:] = (dh * tz) * go * (1.0 - go)
        dh = out @ w_hh
        dz = dz * gf
    return dpre
