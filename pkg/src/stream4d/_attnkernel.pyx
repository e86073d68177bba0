# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled masked scaled-dot-product attention (float64, per-head loops)."""

from libc.math cimport exp, sqrt, INFINITY

import numpy as np
cimport numpy as cnp

cnp.import_array()


def sdpa(double[:, :, ::1] q, double[:, :, ::1] k, double[:, :, ::1] v,
         object visible, bint return_weights):
    cdef Py_ssize_t h = q.shape[0], n = q.shape[1], dh = q.shape[2]
    cdef Py_ssize_t m = k.shape[1]
    cdef double scale = 1.0 / sqrt(<double> dh)

    cdef cnp.ndarray out_arr = np.zeros((h, n, dh), dtype=np.float64)
    cdef cnp.ndarray w_arr = np.zeros((h, n, m), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] w = w_arr

    cdef unsigned char[:, ::1] vis
    cdef bint masked = visible is not None
    if masked:
        vis = visible

    cdef Py_ssize_t hh, i, j, d
    cdef double s, mx, z, wij
    cdef bint any_visible

    for hh in range(h):
        for i in range(n):
            mx = -INFINITY
            any_visible = False
            for j in range(m):
                if masked and vis[i, j] == 0:
                    w[hh, i, j] = -INFINITY
                    continue
                any_visible = True
                s = 0.0
                for d in range(dh):
                    s += q[hh, i, d] * k[hh, j, d]
                s *= scale
                w[hh, i, j] = s
                if s > mx:
                    mx = s
            if not any_visible:
                raise ValueError("attention row has no visible keys")
            z = 0.0
            for j in range(m):
                if masked and vis[i, j] == 0:
                    w[hh, i, j] = 0.0
                    continue
                wij = exp(w[hh, i, j] - mx)
                w[hh, i, j] = wij
                z += wij
            for j in range(m):
                wij = w[hh, i, j]
                if wij == 0.0:
                    continue
                wij /= z
                w[hh, i, j] = wij
                for d in range(dh):
                    out[hh, i, d] += wij * v[hh, j, d]

    return out_arr, (w_arr if return_weights else None)
