# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner-product scan over float32 rows with float64 accumulation.

Each row's score is a sequential float64 sum, so a row scores identically no
matter where it sits in the matrix. Both kernels release the GIL.
"""

import numpy as np

from libc.stdint cimport int64_t, uint64_t


def scan_scores(const float[:, ::1] vectors, const double[::1] query, double[::1] out):
    """out[i] = <vectors[i], query> for every row."""
    cdef Py_ssize_t n = vectors.shape[0], d = vectors.shape[1], i, j
    cdef double acc
    if query.shape[0] != d or out.shape[0] != n:
        raise ValueError("scan_scores: shape mismatch")
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc = acc + <double>vectors[i, j] * query[j]
            out[i] = acc


cdef inline bint _beats(double s, uint64_t sid, double t, uint64_t tid) noexcept nogil:
    return s > t or (s == t and sid < tid)


def scan_top_k(const float[:, ::1] vectors, const uint64_t[::1] ids, const double[::1] query,
               Py_ssize_t k, Py_ssize_t block=1024):
    """Best ``k`` rows by (score desc, id asc) in one pass.

    Keeps a sorted buffer of the current best ``k``; a row is inserted only if
    it beats the buffer's last entry. ``block`` is accepted for signature
    parity with the Python kernel; the compiled scan streams rows directly.
    Returns (row positions int64, scores float64), best first.
    """
    cdef Py_ssize_t n = vectors.shape[0], d = vectors.shape[1], i, j, pos, filled = 0
    cdef double acc
    if query.shape[0] != d or ids.shape[0] != n:
        raise ValueError("scan_top_k: shape mismatch")
    if k > n:
        k = n
    best_pos_arr = np.empty(k, dtype=np.int64)
    best_score_arr = np.empty(k, dtype=np.float64)
    cdef int64_t[::1] best_pos = best_pos_arr
    cdef double[::1] best_score = best_score_arr
    if k <= 0:
        return best_pos_arr, best_score_arr
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc = acc + <double>vectors[i, j] * query[j]
            if filled == k and not _beats(acc, ids[i], best_score[k - 1], ids[best_pos[k - 1]]):
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and _beats(acc, ids[i], best_score[pos - 1], ids[best_pos[pos - 1]]):
                best_score[pos] = best_score[pos - 1]
                best_pos[pos] = best_pos[pos - 1]
                pos -= 1
            best_score[pos] = acc
            best_pos[pos] = i
            if filled < k:
                filled += 1
    return best_pos_arr, best_score_arr
