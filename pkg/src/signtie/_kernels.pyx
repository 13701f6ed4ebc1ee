# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled left-to-right HMM kernels.

Same contracts as ``signtie._kernels_py``; see that module for documentation.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, INFINITY, isfinite

cnp.import_array()

cdef double NEG_INF = -INFINITY


cdef inline double _logaddexp(double a, double b) noexcept nogil:
    cdef double m
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def viterbi_lr(emis_in, log_self_in, log_fwd_in):
    cdef const double[:, ::1] emis = np.ascontiguousarray(emis_in, dtype=np.float64)
    cdef const double[::1] ls = np.ascontiguousarray(log_self_in, dtype=np.float64)
    cdef const double[::1] lf = np.ascontiguousarray(log_fwd_in, dtype=np.float64)
    cdef Py_ssize_t T = emis.shape[0]
    cdef Py_ssize_t N = emis.shape[1]
    cdef Py_ssize_t t, j
    cdef double stay, fwd
    if T < N or N == 0:
        return float("-inf"), np.zeros(0, dtype=np.int64)
    score_a = np.full(N, NEG_INF)
    score_b = np.full(N, NEG_INF)
    moved_a = np.zeros((T, N), dtype=np.uint8)
    cdef double[::1] cur = score_a
    cdef double[::1] nxt = score_b
    cdef double[::1] tmp
    cdef unsigned char[:, ::1] moved = moved_a
    cur[0] = emis[0, 0]
    with nogil:
        for t in range(1, T):
            for j in range(N):
                stay = cur[j] + ls[j]
                if j > 0:
                    fwd = cur[j - 1] + lf[j - 1]
                else:
                    fwd = NEG_INF
                if fwd > stay:
                    moved[t, j] = 1
                    nxt[j] = fwd + emis[t, j]
                else:
                    nxt[j] = stay + emis[t, j]
            tmp = cur
            cur = nxt
            nxt = tmp
    cdef double best = cur[N - 1]
    if not isfinite(best):
        return float("-inf"), np.zeros(0, dtype=np.int64)
    path_a = np.empty(T, dtype=np.int64)
    cdef long long[::1] path = path_a
    j = N - 1
    for t in range(T - 1, -1, -1):
        path[t] = j
        if t > 0 and moved[t, j]:
            j -= 1
    return best, path_a


def viterbi_lr_batch(emis_in, n_states_in, log_self_in, log_fwd_in):
    cdef const double[:, :, ::1] emis = np.ascontiguousarray(emis_in, dtype=np.float64)
    cdef const long long[::1] ns = np.ascontiguousarray(n_states_in, dtype=np.int64)
    cdef const double[:, ::1] ls = np.ascontiguousarray(log_self_in, dtype=np.float64)
    cdef const double[:, ::1] lf = np.ascontiguousarray(log_fwd_in, dtype=np.float64)
    cdef Py_ssize_t U = emis.shape[0]
    cdef Py_ssize_t T = emis.shape[1]
    cdef Py_ssize_t S = emis.shape[2]
    cdef Py_ssize_t u, t, j, n
    cdef double stay, fwd, prev_j, prev_jm1
    out_a = np.full(U, NEG_INF)
    cdef double[::1] out = out_a
    buf_a = np.empty(S, dtype=np.float64)
    cdef double[::1] buf = buf_a
    with nogil:
        for u in range(U):
            n = ns[u]
            if n > T or n == 0:
                continue
            for j in range(n):
                buf[j] = NEG_INF
            buf[0] = emis[u, 0, 0]
            for t in range(1, T):
                # update in place from the last state backwards
                for j in range(n - 1, -1, -1):
                    stay = buf[j] + ls[u, j]
                    if j > 0:
                        fwd = buf[j - 1] + lf[u, j - 1]
                        if fwd > stay:
                            stay = fwd
                    buf[j] = stay + emis[u, t, j]
            out[u] = buf[n - 1]
    return out_a


def forward_backward_lr(emis_in, log_self_in, log_fwd_in):
    cdef const double[:, ::1] emis = np.ascontiguousarray(emis_in, dtype=np.float64)
    cdef const double[::1] ls = np.ascontiguousarray(log_self_in, dtype=np.float64)
    cdef const double[::1] lf = np.ascontiguousarray(log_fwd_in, dtype=np.float64)
    cdef Py_ssize_t T = emis.shape[0]
    cdef Py_ssize_t N = emis.shape[1]
    cdef Py_ssize_t t, j
    cdef double a, ll, nx
    if T < N:
        return float("-inf"), np.zeros((T, N)), np.zeros(N), np.zeros(N)
    alpha_a = np.full((T, N), NEG_INF)
    beta_a = np.full((T, N), NEG_INF)
    gamma_a = np.zeros((T, N))
    sc_a = np.zeros(N)
    fc_a = np.zeros(N)
    cdef double[:, ::1] alpha = alpha_a
    cdef double[:, ::1] beta = beta_a
    cdef double[:, ::1] gamma = gamma_a
    cdef double[::1] sc = sc_a
    cdef double[::1] fc = fc_a
    with nogil:
        alpha[0, 0] = emis[0, 0]
        for t in range(1, T):
            for j in range(N):
                a = alpha[t - 1, j] + ls[j]
                if j > 0:
                    a = _logaddexp(a, alpha[t - 1, j - 1] + lf[j - 1])
                alpha[t, j] = a + emis[t, j]
        beta[T - 1, N - 1] = 0.0
        for t in range(T - 2, -1, -1):
            for j in range(N):
                a = beta[t + 1, j] + emis[t + 1, j] + ls[j]
                if j + 1 < N:
                    a = _logaddexp(a, beta[t + 1, j + 1] + emis[t + 1, j + 1] + lf[j])
                beta[t, j] = a
        ll = alpha[T - 1, N - 1]
    if not isfinite(ll):
        return float("-inf"), np.zeros((T, N)), np.zeros(N), np.zeros(N)
    with nogil:
        for t in range(T):
            for j in range(N):
                a = alpha[t, j] + beta[t, j] - ll
                if a > NEG_INF:
                    gamma[t, j] = exp(a)
        for t in range(T - 1):
            for j in range(N):
                if alpha[t, j] == NEG_INF:
                    continue
                nx = beta[t + 1, j] + emis[t + 1, j]
                a = alpha[t, j] + ls[j] + nx - ll
                if a > NEG_INF:
                    sc[j] += exp(a)
                if j + 1 < N:
                    nx = beta[t + 1, j + 1] + emis[t + 1, j + 1]
                    a = alpha[t, j] + lf[j] + nx - ll
                    if a > NEG_INF:
                        fc[j] += exp(a)
    return ll, gamma_a, sc_a, fc_a


def lr_step(prev_in, prev_hist_in, entry_in, entry_hist_in, emis_in,
            log_self_in, log_fwd_in, n_states_in):
    cdef const double[:, ::1] prev = np.ascontiguousarray(prev_in, dtype=np.float64)
    cdef const long long[:, ::1] phist = np.ascontiguousarray(prev_hist_in, dtype=np.int64)
    cdef const double[::1] entry = np.ascontiguousarray(entry_in, dtype=np.float64)
    cdef const long long[::1] ehist = np.ascontiguousarray(entry_hist_in, dtype=np.int64)
    cdef const double[:, ::1] emis = np.ascontiguousarray(emis_in, dtype=np.float64)
    cdef const double[:, ::1] ls = np.ascontiguousarray(log_self_in, dtype=np.float64)
    cdef const double[:, ::1] lf = np.ascontiguousarray(log_fwd_in, dtype=np.float64)
    cdef const long long[::1] ns = np.ascontiguousarray(n_states_in, dtype=np.int64)
    cdef Py_ssize_t U = prev.shape[0]
    cdef Py_ssize_t S = prev.shape[1]
    cdef Py_ssize_t u, j
    cdef double stay, fwd, v
    score_a = np.full((U, S), NEG_INF)
    hist_a = np.empty((U, S), dtype=np.int64)
    entered_a = np.zeros(U, dtype=bool)
    cdef double[:, ::1] score = score_a
    cdef long long[:, ::1] hist = hist_a
    cdef cnp.npy_bool[::1] entered = entered_a
    with nogil:
        for u in range(U):
            for j in range(S):
                hist[u, j] = phist[u, j]
                if j >= ns[u]:
                    continue
                stay = prev[u, j] + ls[u, j]
                if j == 0:
                    fwd = entry[u]
                else:
                    fwd = prev[u, j - 1] + lf[u, j - 1]
                if fwd > stay:
                    v = fwd
                    if j == 0:
                        hist[u, j] = ehist[u]
                        entered[u] = 1
                    else:
                        hist[u, j] = phist[u, j - 1]
                else:
                    v = stay
                v = v + emis[u, j]
                if v != v:
                    v = NEG_INF
                score[u, j] = v
    return score_a, hist_a, entered_a
