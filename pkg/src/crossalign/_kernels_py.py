"""Pure numpy versions of the hot kernels.

These define the reference semantics; the compiled module in ``_kernels_c``
must agree with them to rounding.
"""
import numpy as np

BACKEND = "python"


def sqdist(X, Y):
    """Squared Euclidean distances between rows, batched: [b,m,D] x [b,n,D] -> [b,m,n].

    Computed from explicit differences so coincident points give exactly 0.
    """
    diff = X[:, :, None, :] - Y[:, None, :, :]
    return np.einsum("bmnd,bmnd->bmn", diff, diff)


def sqdist_backward(g, X, Y):
    gx = 2.0 * (g.sum(axis=2)[:, :, None] * X - g @ Y)
    gy = 2.0 * (g.sum(axis=1)[:, :, None] * Y - np.swapaxes(g, 1, 2) @ X)
    return gx, gy


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_scan(xp, Wh, bh, reverse):
    """Run one GRU direction over precomputed input projections.

    xp: [B, N, 3H] holding x@W_i + b_i for the reset/update/candidate gates.
    Returns hidden states [B, N, H] (indexed by token position, whichever the
    direction), the gate activations [B, N, 3H] and the recurrent candidate
    term h_prev@W_hn + b_hn [B, N, H] needed by the backward pass.
    """
    B, N, H3 = xp.shape
    H = H3 // 3
    hs = np.empty((B, N, H))
    gates = np.empty((B, N, H3))
    hn_all = np.empty((B, N, H))
    h = np.zeros((B, H))
    steps = range(N - 1, -1, -1) if reverse else range(N)
    for t in steps:
        hh = h @ Wh + bh
        a = xp[:, t]
        r = _sigmoid(a[:, :H] + hh[:, :H])
        z = _sigmoid(a[:, H:2 * H] + hh[:, H:2 * H])
        hn = hh[:, 2 * H:]
        n = np.tanh(a[:, 2 * H:] + r * hn)
        h = (1.0 - z) * n + z * h
        hs[:, t] = h
        gates[:, t, :H] = r
        gates[:, t, H:2 * H] = z
        gates[:, t, 2 * H:] = n
        hn_all[:, t] = hn
    return hs, gates, hn_all


def gru_scan_backward(g_hs, Wh, hs, gates, hn_all, reverse):
    B, N, H = hs.shape
    dxp = np.empty((B, N, 3 * H))
    dWh = np.zeros_like(Wh)
    dbh = np.zeros(3 * H)
    dh = np.zeros((B, H))
    steps = range(N) if reverse else range(N - 1, -1, -1)
    for t in steps:
        prev_t = t + 1 if reverse else t - 1
        h_prev = hs[:, prev_t] if 0 <= prev_t < N else np.zeros((B, H))
        r = gates[:, t, :H]
        z = gates[:, t, H:2 * H]
        n = gates[:, t, 2 * H:]
        hn = hn_all[:, t]
        dh = dh + g_hs[:, t]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dan = dn * (1.0 - n * n)
        dr = dan * hn
        dar = dr * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dhh = np.concatenate([dar, daz, dan * r], axis=1)
        dxp[:, t, :H] = dar
        dxp[:, t, H:2 * H] = daz
        dxp[:, t, 2 * H:] = dan
        dWh += h_prev.T @ dhh
        dbh += dhh.sum(axis=0)
        dh = dh * z + dhh @ Wh.T
    return dxp, dWh, dbh
