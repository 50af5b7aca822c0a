# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels; semantics follow ``_kernels_py``."""
import numpy as np
from libc.math cimport tanh

BACKEND = "cython"


cdef inline double _sigmoid(double x) nogil:
    return 0.5 * (1.0 + tanh(0.5 * x))


def sqdist(const double[:, :, ::1] X, const double[:, :, ::1] Y):
    cdef Py_ssize_t b = X.shape[0], m = X.shape[1], n = Y.shape[1], D = X.shape[2]
    out = np.empty((b, m, n))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t k, i, j, d
    cdef double acc, diff
    with nogil:
        for k in range(b):
            for i in range(m):
                for j in range(n):
                    acc = 0.0
                    for d in range(D):
                        diff = X[k, i, d] - Y[k, j, d]
                        acc = acc + diff * diff
                    o[k, i, j] = acc
    return out


def sqdist_backward(const double[:, :, ::1] g, const double[:, :, ::1] X, const double[:, :, ::1] Y):
    cdef Py_ssize_t b = X.shape[0], m = X.shape[1], n = Y.shape[1], D = X.shape[2]
    gx_arr = np.zeros((b, m, D))
    gy_arr = np.zeros((b, n, D))
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gy = gy_arr
    cdef Py_ssize_t k, i, j, d
    cdef double w
    with nogil:
        for k in range(b):
            for i in range(m):
                for j in range(n):
                    w = 2.0 * g[k, i, j]
                    for d in range(D):
                        gx[k, i, d] += w * (X[k, i, d] - Y[k, j, d])
                        gy[k, j, d] -= w * (X[k, i, d] - Y[k, j, d])
    return gx_arr, gy_arr


def gru_scan(const double[:, :, ::1] xp, const double[:, ::1] Wh, const double[::1] bh, bint reverse):
    cdef Py_ssize_t B = xp.shape[0], N = xp.shape[1], H = xp.shape[2] // 3
    hs_arr = np.empty((B, N, H))
    gates_arr = np.empty((B, N, 3 * H))
    hn_arr = np.empty((B, N, H))
    h_arr = np.zeros((B, H))
    hh_arr = np.empty(3 * H)
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] gates = gates_arr
    cdef double[:, :, ::1] hn_all = hn_arr
    cdef double[:, ::1] h = h_arr
    cdef double[::1] hh = hh_arr
    cdef Py_ssize_t b, s, t, i, j
    cdef double acc, r, z, n
    with nogil:
        for b in range(B):
            for s in range(N):
                t = N - 1 - s if reverse else s
                for j in range(3 * H):
                    hh[j] = bh[j]
                # row-major sweep over Wh; same summation order as a dot per column
                for i in range(H):
                    acc = h[b, i]
                    for j in range(3 * H):
                        hh[j] = hh[j] + acc * Wh[i, j]
                for j in range(H):
                    r = _sigmoid(xp[b, t, j] + hh[j])
                    z = _sigmoid(xp[b, t, H + j] + hh[H + j])
                    n = tanh(xp[b, t, 2 * H + j] + r * hh[2 * H + j])
                    gates[b, t, j] = r
                    gates[b, t, H + j] = z
                    gates[b, t, 2 * H + j] = n
                    hn_all[b, t, j] = hh[2 * H + j]
                for j in range(H):
                    z = gates[b, t, H + j]
                    h[b, j] = (1.0 - z) * gates[b, t, 2 * H + j] + z * h[b, j]
                    hs[b, t, j] = h[b, j]
    return hs_arr, gates_arr, hn_arr


def gru_scan_backward(const double[:, :, ::1] g_hs, const double[:, ::1] Wh,
                      const double[:, :, ::1] hs, const double[:, :, ::1] gates,
                      const double[:, :, ::1] hn_all, bint reverse):
    cdef Py_ssize_t B = hs.shape[0], N = hs.shape[1], H = hs.shape[2]
    dxp_arr = np.empty((B, N, 3 * H))
    dWh_arr = np.zeros((H, 3 * H))
    dbh_arr = np.zeros(3 * H)
    dh_arr = np.zeros(H)
    dnext_arr = np.zeros(H)
    dhh_arr = np.zeros(3 * H)
    hprev_arr = np.zeros(H)
    cdef double[:, :, ::1] dxp = dxp_arr
    cdef double[:, ::1] dWh = dWh_arr
    cdef double[::1] dbh = dbh_arr
    cdef double[::1] dh = dh_arr
    cdef double[::1] dnext = dnext_arr
    cdef double[::1] dhh = dhh_arr
    cdef double[::1] hprev = hprev_arr
    cdef Py_ssize_t b, s, t, pt, i, j
    cdef double r, z, n, dn, dz, dan, dar, daz, acc
    with nogil:
        for b in range(B):
            for j in range(H):
                dh[j] = 0.0
            for s in range(N):
                t = s if reverse else N - 1 - s
                pt = t + 1 if reverse else t - 1
                for j in range(H):
                    hprev[j] = hs[b, pt, j] if 0 <= pt < N else 0.0
                for j in range(H):
                    dh[j] = dh[j] + g_hs[b, t, j]
                    r = gates[b, t, j]
                    z = gates[b, t, H + j]
                    n = gates[b, t, 2 * H + j]
                    dn = dh[j] * (1.0 - z)
                    dz = dh[j] * (hprev[j] - n)
                    dan = dn * (1.0 - n * n)
                    dar = dan * hn_all[b, t, j] * r * (1.0 - r)
                    daz = dz * z * (1.0 - z)
                    dxp[b, t, j] = dar
                    dxp[b, t, H + j] = daz
                    dxp[b, t, 2 * H + j] = dan
                    dhh[j] = dar
                    dhh[H + j] = daz
                    dhh[2 * H + j] = dan * r
                    dnext[j] = dh[j] * z
                for j in range(3 * H):
                    dbh[j] += dhh[j]
                for i in range(H):
                    acc = hprev[i]
                    for j in range(3 * H):
                        dWh[i, j] += acc * dhh[j]
                for i in range(H):
                    acc = dnext[i]
                    for j in range(3 * H):
                        acc = acc + dhh[j] * Wh[i, j]
                    dh[i] = acc
    return dxp_arr, dWh_arr, dbh_arr
