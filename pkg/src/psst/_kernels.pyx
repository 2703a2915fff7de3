# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled hot kernels: fused GRU gate math and n-gram TF-IDF scoring."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, sqrt
from libcpp.unordered_map cimport unordered_map
from libcpp.vector cimport vector
from cython.operator cimport dereference as deref, preincrement as inc

cnp.import_array()

DEF MAX_N = 4
DEF TOKEN_BITS = 14


def gru_gates_forward(double[:, ::1] az, double[:, ::1] ar, double[:, ::1] xn,
                      double[:, ::1] hn, double[:, ::1] h, mask):
    cdef Py_ssize_t B = az.shape[0], H = az.shape[1], i, j
    z_arr = np.empty((B, H))
    r_arr = np.empty((B, H))
    n_arr = np.empty((B, H))
    out_arr = np.empty((B, H))
    cdef double[:, ::1] z = z_arr, r = r_arr, n = n_arr, out = out_arr
    cdef double[::1] m
    cdef bint masked = mask is not None
    cdef double mi = 1.0, c
    if masked:
        m = np.ascontiguousarray(mask, dtype=np.float64)
    with nogil:
        for i in range(B):
            if masked:
                mi = m[i]
            for j in range(H):
                z[i, j] = 1.0 / (1.0 + exp(-az[i, j]))
                r[i, j] = 1.0 / (1.0 + exp(-ar[i, j]))
                n[i, j] = tanh(xn[i, j] + r[i, j] * hn[i, j])
                c = (1.0 - z[i, j]) * n[i, j] + z[i, j] * h[i, j]
                out[i, j] = h[i, j] + mi * (c - h[i, j])
    return z_arr, r_arr, n_arr, out_arr


def gru_gates_backward(double[:, ::1] g, double[:, ::1] z, double[:, ::1] r,
                       double[:, ::1] n, double[:, ::1] hn, double[:, ::1] h, mask):
    cdef Py_ssize_t B = g.shape[0], H = g.shape[1], i, j
    g_az_arr = np.empty((B, H))
    g_ar_arr = np.empty((B, H))
    g_xn_arr = np.empty((B, H))
    g_hn_arr = np.empty((B, H))
    g_h_arr = np.empty((B, H))
    cdef double[:, ::1] g_az = g_az_arr, g_ar = g_ar_arr, g_xn = g_xn_arr
    cdef double[:, ::1] g_hn = g_hn_arr, g_h = g_h_arr
    cdef double[::1] m
    cdef bint masked = mask is not None
    cdef double mi = 1.0, gc, gz, gpn, gr
    if masked:
        m = np.ascontiguousarray(mask, dtype=np.float64)
    with nogil:
        for i in range(B):
            if masked:
                mi = m[i]
            for j in range(H):
                gc = mi * g[i, j]
                g_h[i, j] = (1.0 - mi) * g[i, j] + gc * z[i, j]
                gz = gc * (h[i, j] - n[i, j])
                gpn = gc * (1.0 - z[i, j]) * (1.0 - n[i, j] * n[i, j])
                gr = gpn * hn[i, j]
                g_xn[i, j] = gpn
                g_hn[i, j] = gpn * r[i, j]
                g_az[i, j] = gz * z[i, j] * (1.0 - z[i, j])
                g_ar[i, j] = gr * r[i, j] * (1.0 - r[i, j])
    return g_az_arr, g_ar_arr, g_xn_arr, g_hn_arr, g_h_arr


ctypedef unordered_map[long long, double] Vec


cdef void _build(long long[::1] toks, Py_ssize_t length, Vec* vecs,
                 double* norms, unordered_map[long long, double]* idf,
                 double default_idf) noexcept nogil:
    cdef Py_ssize_t n, i, k
    cdef long long key
    cdef double w, s
    cdef unordered_map[long long, double].iterator it, found
    for n in range(1, MAX_N + 1):
        vecs[n - 1].clear()
        for i in range(length - n + 1):
            key = n
            for k in range(n):
                key = (key << TOKEN_BITS) | toks[i + k]
            vecs[n - 1][key] += 1.0
        s = 0.0
        it = vecs[n - 1].begin()
        while it != vecs[n - 1].end():
            found = idf.find(deref(it).first)
            if found == idf.end():
                w = deref(it).second * default_idf
            else:
                w = deref(it).second * deref(found).second
            deref(it).second = w
            s += w * w
            inc(it)
        norms[n - 1] = sqrt(s)


cdef class CiderScorer:
    """TF-IDF n-gram cosine scorer over integer token sequences."""

    cdef unordered_map[long long, double] _idf
    cdef double default_idf

    def __init__(self, keys, idf, double default_idf):
        cdef long long[::1] k = np.ascontiguousarray(keys, dtype=np.int64)
        cdef double[::1] v = np.ascontiguousarray(idf, dtype=np.float64)
        cdef Py_ssize_t i
        self._idf.clear()
        for i in range(k.shape[0]):
            self._idf[k[i]] = v[i]
        self.default_idf = default_idf

    cdef double _score(self, long long[::1] cand, list references):
        cdef Vec cvecs[MAX_N]
        cdef Vec rvecs[MAX_N]
        cdef double cnorms[MAX_N]
        cdef double rnorms[MAX_N]
        cdef double total = 0.0, dot
        cdef Py_ssize_t n, nrefs = len(references)
        cdef long long[::1] ref
        cdef Vec.iterator it, found
        if cand.shape[0] == 0 or nrefs == 0:
            return 0.0
        _build(cand, cand.shape[0], cvecs, cnorms, &self._idf, self.default_idf)
        for r in references:
            ref = np.ascontiguousarray(r, dtype=np.int64)
            _build(ref, ref.shape[0], rvecs, rnorms, &self._idf, self.default_idf)
            for n in range(MAX_N):
                if cnorms[n] == 0.0 or rnorms[n] == 0.0:
                    continue
                dot = 0.0
                it = cvecs[n].begin()
                while it != cvecs[n].end():
                    found = rvecs[n].find(deref(it).first)
                    if found != rvecs[n].end():
                        dot += deref(it).second * deref(found).second
                    inc(it)
                total += dot / (cnorms[n] * rnorms[n])
        return total / (MAX_N * nrefs)

    def score(self, candidate, references):
        cdef long long[::1] cand = np.ascontiguousarray(candidate, dtype=np.int64)
        return self._score(cand, list(references))

    def score_many(self, candidates, references):
        cdef Py_ssize_t i, N = len(candidates)
        out = np.empty(N)
        cdef double[::1] o = out
        cdef long long[::1] cand
        for i in range(N):
            cand = np.ascontiguousarray(candidates[i], dtype=np.int64)
            o[i] = self._score(cand, list(references[i]))
        return out
