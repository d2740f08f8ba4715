# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled grid-encoding kernels.

Mirrors :mod:`hnfd._kernels_py` exactly in semantics; only the summation
order differs, so results agree to rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

cdef uint64_t[3] _PRIMES
_PRIMES[0] = 1
_PRIMES[1] = 2654435761
_PRIMES[2] = 805459861


def level_forward(const double[:, ::1] x, const double[:, ::1] table,
                  int res, bint hashed, bint tangents):
    cdef Py_ssize_t B = x.shape[0]
    cdef int m = <int>x.shape[1]
    cdef Py_ssize_t F = table.shape[1]
    cdef uint64_t R = <uint64_t>table.shape[0]
    cdef int C = 1 << m

    idx_arr = np.empty((B, C), dtype=np.int64)
    w_arr = np.empty((B, C), dtype=np.float64)
    feats_arr = np.zeros((B, F), dtype=np.float64)
    cdef int64_t[:, ::1] idx = idx_arr
    cdef double[:, ::1] w = w_arr
    cdef double[:, ::1] feats = feats_arr

    cdef double[:, :, ::1] dw
    cdef double[:, :, ::1] dfeats
    if tangents:
        dw_arr = np.empty((B, m, C), dtype=np.float64)
        dfeats_arr = np.zeros((m, B, F), dtype=np.float64)
        dw = dw_arr
        dfeats = dfeats_arr
    else:
        dw_arr = None
        dfeats_arr = None

    cdef double scale = 0.5 * (res - 1)
    cdef int64_t cell[3]
    cdef double t[3]
    cdef int bits[3]
    cdef Py_ssize_t b, f
    cdef int j, k, c
    cdef double u, wt, d
    cdef int64_t i, v, lin
    cdef uint64_t h, index

    with nogil:
        for b in range(B):
            for j in range(m):
                u = (x[b, j] + 1.0) * scale
                i = <int64_t>floor(u)
                if i < 0:
                    i = 0
                if i > res - 2:
                    i = res - 2
                cell[j] = i
                t[j] = u - i
            for c in range(C):
                wt = 1.0
                h = 0
                lin = 0
                for j in range(m):
                    bits[j] = (c >> (m - 1 - j)) & 1
                    v = cell[j] + bits[j]
                    if bits[j]:
                        wt = wt * t[j]
                    else:
                        wt = wt * (1.0 - t[j])
                    if hashed:
                        h = h ^ (<uint64_t>v * _PRIMES[j])
                    else:
                        lin = lin * res + v
                if hashed:
                    index = h % R
                else:
                    index = <uint64_t>lin
                idx[b, c] = <int64_t>index
                w[b, c] = wt
                for f in range(F):
                    feats[b, f] += wt * table[index, f]
                if tangents:
                    for j in range(m):
                        d = scale if bits[j] else -scale
                        for k in range(m):
                            if k != j:
                                if bits[k]:
                                    d = d * t[k]
                                else:
                                    d = d * (1.0 - t[k])
                        dw[b, j, c] = d
                        for f in range(F):
                            dfeats[j, b, f] += d * table[index, f]
    return feats_arr, dfeats_arr, idx_arr, w_arr, dw_arr


def level_backward(const int64_t[:, ::1] idx, const double[:, ::1] w, dw,
                   const double[:, ::1] gfeat, gdfeat, double[:, ::1] grad_table):
    cdef Py_ssize_t B = idx.shape[0]
    cdef Py_ssize_t C = idx.shape[1]
    cdef Py_ssize_t F = gfeat.shape[1]
    cdef bint tangents = dw is not None and gdfeat is not None
    cdef const double[:, :, ::1] dwv
    cdef const double[:, :, ::1] gdv
    cdef Py_ssize_t m = 0
    if tangents:
        dwv = dw
        gdv = gdfeat
        m = dwv.shape[1]
    cdef Py_ssize_t b, c, f, j
    cdef int64_t index
    cdef double acc
    with nogil:
        for b in range(B):
            for c in range(C):
                index = idx[b, c]
                for f in range(F):
                    acc = w[b, c] * gfeat[b, f]
                    if tangents:
                        for j in range(m):
                            acc = acc + dwv[b, j, c] * gdv[j, b, f]
                    grad_table[index, f] += acc
