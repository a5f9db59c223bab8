"""Pure numpy GRU sequence kernels (reference implementation and import fallback).

Gate layout follows the common (reset, update, candidate) stacking: rows
``[0:H]`` of the stacked matrices drive the reset gate, ``[H:2H]`` the update
gate and ``[2H:3H]`` the candidate state.

    r = sig(Wx_r u + bx_r + Wh_r h + bh_r)
    z = sig(Wx_z u + bx_z + Wh_z h + bh_z)
    n = tanh(Wx_n u + bx_n + r * (Wh_n h + bh_n))
    h' = (1 - z) * n + z * h
"""

import numpy as np


def sigmoid(x):
    return 0.5 * np.tanh(0.5 * x) + 0.5


def gru_forward(U, Wx, Wh, bx, bh):
    """Run the recurrence from a zero state over every row of ``U`` [B, T, P].

    Returns ``(hs, gates, hn)``: hidden states [B, T, H], post-activation
    gates (r, z, n) [B, T, 3H] and the recurrent candidate term
    ``Wh_n h + bh_n`` [B, T, H] needed by the backward pass.
    """
    B, T, _ = U.shape
    H = Wh.shape[1]
    gx = U @ Wx.T + bx
    hs = np.empty((B, T, H))
    gates = np.empty((B, T, 3 * H))
    hn = np.empty((B, T, H))
    h = np.zeros((B, H))
    for t in range(T):
        gh = h @ Wh.T + bh
        r = sigmoid(gx[:, t, :H] + gh[:, :H])
        z = sigmoid(gx[:, t, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gx[:, t, 2 * H:] + r * gh[:, 2 * H:])
        h = (1.0 - z) * n + z * h
        hs[:, t] = h
        gates[:, t, :H] = r
        gates[:, t, H:2 * H] = z
        gates[:, t, 2 * H:] = n
        hn[:, t] = gh[:, 2 * H:]
    return hs, gates, hn


def gru_backward(U, Wx, Wh, hs, gates, hn, dhs):
    """Backpropagate ``dhs`` = dL/dhs [B, T, H] through the whole sequence.

    Returns ``(dU, dWx, dWh, dbx, dbh)``.
    """
    B, T, P = U.shape
    H = Wh.shape[1]
    dgx = np.empty((B, T, 3 * H))
    dWh = np.zeros_like(Wh)
    dbh = np.zeros(3 * H)
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        r = gates[:, t, :H]
        z = gates[:, t, H:2 * H]
        n = gates[:, t, 2 * H:]
        h_prev = hs[:, t - 1] if t > 0 else np.zeros((B, H))
        dh = dhs[:, t] + dh_next
        dn = dh * (1.0 - z) * (1.0 - n * n)
        dz = dh * (h_prev - n) * z * (1.0 - z)
        dr = dn * hn[:, t] * r * (1.0 - r)
        dgh = np.concatenate([dr, dz, dn * r], axis=1)
        dgx[:, t] = np.concatenate([dr, dz, dn], axis=1)
        dWh += dgh.T @ h_prev
        dbh += dgh.sum(axis=0)
        dh_next = dh * z + dgh @ Wh
    flat = dgx.reshape(B * T, 3 * H)
    dWx = flat.T @ U.reshape(B * T, P)
    dbx = flat.sum(axis=0)
    dU = dgx @ Wx
    return dU, dWx, dWh, dbx, dbh
