"""Pure-Python/numpy versions of the hot kernels.

Selected by :mod:`psst.kernels` when the compiled ``_kernels`` extension is
missing or ``PSST_PURE_PYTHON=1`` is set. Both backends must agree to within
floating-point reassociation; ``tests/test_kernels.py`` checks this.
"""

from collections import Counter

import numpy as np

MAX_N = 4
TOKEN_BITS = 14
MAX_TOKEN = (1 << TOKEN_BITS) - 1


def ngram_id(tokens, start, n):
    key = n
    for k in range(n):
        key = (key << TOKEN_BITS) | int(tokens[start + k])
    return key


def ngram_ids(tokens, n):
    return [ngram_id(tokens, i, n) for i in range(len(tokens) - n + 1)]


def gru_gates_forward(az, ar, xn, hn, h, mask):
    z = 1.0 / (1.0 + np.exp(-az))
    r = 1.0 / (1.0 + np.exp(-ar))
    n = np.tanh(xn + r * hn)
    cand = (1.0 - z) * n + z * h
    if mask is None:
        h_new = cand
    else:
        m = mask[:, None]
        h_new = h + m * (cand - h)
    return z, r, n, h_new


def gru_gates_backward(g, z, r, n, hn, h, mask):
    """Returns grads w.r.t. (az, ar, xn, hn, h) given dLoss/dh_new."""
    if mask is None:
        g_cand = g
        g_h = g * z
    else:
        m = mask[:, None]
        g_cand = m * g
        g_h = (1.0 - m) * g + g_cand * z
    g_z = g_cand * (h - n)
    g_pre_n = g_cand * (1.0 - z) * (1.0 - n * n)
    g_r = g_pre_n * hn
    g_hn = g_pre_n * r
    g_az = g_z * z * (1.0 - z)
    g_ar = g_r * r * (1.0 - r)
    return g_az, g_ar, g_pre_n, g_hn, g_h


class CiderScorer:
    """TF-IDF n-gram cosine scorer over integer token sequences.

    ``keys``/``idf`` are parallel arrays: encoded n-gram id -> idf weight.
    N-grams absent from the table get ``default_idf``.
    """

    def __init__(self, keys, idf, default_idf):
        self.idf = dict(zip((int(k) for k in keys), (float(v) for v in idf)))
        self.default_idf = float(default_idf)

    def _vectors(self, tokens):
        vecs = []
        norms = []
        for n in range(1, MAX_N + 1):
            counts = Counter(ngram_ids(tokens, n))
            vec = {k: c * self.idf.get(k, self.default_idf) for k, c in counts.items()}
            vecs.append(vec)
            norms.append(float(np.sqrt(sum(w * w for w in vec.values()))))
        return vecs, norms

    def score(self, candidate, references):
        candidate = [int(t) for t in candidate]
        if not candidate or not references:
            return 0.0
        cvecs, cnorms = self._vectors(candidate)
        total = 0.0
        for ref in references:
            rvecs, rnorms = self._vectors([int(t) for t in ref])
            for n in range(MAX_N):
                if cnorms[n] == 0.0 or rnorms[n] == 0.0:
                    continue
                rv = rvecs[n]
                dot = sum(w * rv.get(k, 0.0) for k, w in cvecs[n].items())
                total += dot / (cnorms[n] * rnorms[n])
        return total / (MAX_N * len(references))

    def score_many(self, candidates, references):
        out = np.empty(len(candidates))
        for i, (cand, refs) in enumerate(zip(candidates, references)):
            out[i] = self.score(cand, refs)
        return out
