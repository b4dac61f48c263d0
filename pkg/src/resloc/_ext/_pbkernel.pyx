# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Poisson-binomial quantile kernels (compiled)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef Py_ssize_t _quantile(const double[:] p, double beta, double[:] pmf) noexcept nogil:
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i, j
    cdef double pi, qi, acc
    pmf[0] = 1.0
    for j in range(1, n + 1):
        pmf[j] = 0.0
    for i in range(n):
        pi = p[i]
        qi = 1.0 - pi
        for j in range(i + 1, 0, -1):
            pmf[j] = pmf[j] * qi + pmf[j - 1] * pi
        pmf[0] = pmf[0] * qi
    acc = 0.0
    for j in range(n + 1):
        acc += pmf[j]
        if acc >= beta:
            return j
    return n


def pb_quantile(p, double beta):
    cdef const double[:] pv = np.ascontiguousarray(p, dtype=np.float64)
    if pv.shape[0] == 0:
        raise ValueError("empty probability list")
    cdef double[:] pmf = np.empty(pv.shape[0] + 1)
    return int(_quantile(pv, beta, pmf))


def window_violations(flags, probs, double beta):
    """Columns of a (W, q) window whose outlier count exceeds the quantile."""
    cdef const unsigned char[:, :] f = np.ascontiguousarray(flags, dtype=np.uint8)
    cdef const double[:, :] pr = np.asfortranarray(probs, dtype=np.float64)
    cdef Py_ssize_t W = f.shape[0]
    cdef Py_ssize_t nq = f.shape[1]
    cdef Py_ssize_t q, k, count
    cdef double[:] pmf = np.empty(W + 1)
    out = np.zeros(nq, dtype=bool)
    cdef cnp.uint8_t[:] ov = out.view(np.uint8)
    for q in range(nq):
        count = 0
        for k in range(W):
            count += f[k, q]
        if count == 0:
            continue
        if count > _quantile(pr[:, q], beta, pmf):
            ov[q] = 1
    return out
