# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; same contracts as ``planmax._pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()

ctypedef cnp.int64_t idx_t


cdef inline double _lse(double* q, int n) noexcept nogil:
    cdef double m = -INFINITY
    cdef double s = 0.0
    cdef int a
    for a in range(n):
        if q[a] > m:
            m = q[a]
    if m == -INFINITY:
        return -INFINITY
    for a in range(n):
        s += exp(q[a] - m)
    return m + log(s)


cdef inline void _policy(double* q, double v, double* p, int n) noexcept nogil:
    cdef int a
    for a in range(n):
        if v == -INFINITY:
            p[a] = 0.0
        else:
            p[a] = exp(q[a] - v)


def solve_inferred(const double[::1] r_path, const double[::1] r_goal, const idx_t[:, ::1] nbr, int n_steps):
    cdef Py_ssize_t S = r_path.shape[0]
    V_arr = np.empty((n_steps + 1, S))
    Q_arr = np.empty((n_steps, S, 5))
    P_arr = np.empty((n_steps, S, 5))
    cdef double[:, ::1] V = V_arr
    cdef double[:, :, ::1] Q = Q_arr
    cdef double[:, :, ::1] P = P_arr
    cdef Py_ssize_t s, n
    cdef int a
    cdef idx_t t
    with nogil:
        for s in range(S):
            V[n_steps, s] = -INFINITY
        for n in range(n_steps, 0, -1):
            for s in range(S):
                for a in range(4):
                    t = nbr[s, a]
                    if t >= 0:
                        Q[n - 1, s, a] = r_path[s] + V[n, t]
                    else:
                        Q[n - 1, s, a] = -INFINITY
                Q[n - 1, s, 4] = r_path[s] + r_goal[s]
                V[n - 1, s] = _lse(&Q[n - 1, s, 0], 5)
                _policy(&Q[n - 1, s, 0], V[n - 1, s], &P[n - 1, s, 0], 5)
    return V_arr, Q_arr, P_arr


def solve_goal(const double[::1] r, const idx_t[:, ::1] nbr, Py_ssize_t goal, int n_steps):
    cdef Py_ssize_t S = r.shape[0]
    V_arr = np.empty((n_steps + 1, S))
    Q_arr = np.empty((n_steps, S, 4))
    P_arr = np.empty((n_steps, S, 4))
    cdef double[:, ::1] V = V_arr
    cdef double[:, :, ::1] Q = Q_arr
    cdef double[:, :, ::1] P = P_arr
    cdef Py_ssize_t s, n
    cdef int a
    cdef idx_t t
    with nogil:
        for s in range(S):
            V[n_steps, s] = -INFINITY
        for n in range(n_steps, 0, -1):
            V[n, goal] = 0.0
            for s in range(S):
                for a in range(4):
                    t = nbr[s, a]
                    if t >= 0:
                        Q[n - 1, s, a] = r[s] + V[n, t]
                    else:
                        Q[n - 1, s, a] = -INFINITY
                V[n - 1, s] = _lse(&Q[n - 1, s, 0], 4)
                _policy(&Q[n - 1, s, 0], V[n - 1, s], &P[n - 1, s, 0], 4)
    return V_arr, Q_arr, P_arr


def propagate_inferred(const double[:, :, ::1] pi, const idx_t[:, ::1] nbr, Py_ssize_t s_init):
    cdef Py_ssize_t N = pi.shape[0], S = pi.shape[1]
    Dp_arr = np.zeros((N + 1, S))
    Dg_arr = np.zeros((N + 1, S))
    cdef double[:, ::1] Dp = Dp_arr
    cdef double[:, ::1] Dg = Dg_arr
    cdef Py_ssize_t n, s
    cdef int a
    cdef idx_t t
    cdef double d
    Dp[0, s_init] = 1.0
    with nogil:
        for n in range(N):
            for s in range(S):
                d = Dp[n, s]
                if d == 0.0:
                    continue
                for a in range(4):
                    t = nbr[s, a]
                    if t >= 0:
                        Dp[n + 1, t] += d * pi[n, s, a]
                Dg[n + 1, s] = d * pi[n, s, 4]
    return Dp_arr, Dg_arr


def propagate_goal(const double[:, :, ::1] pi, const idx_t[:, ::1] nbr, Py_ssize_t s_init, Py_ssize_t goal):
    cdef Py_ssize_t N = pi.shape[0], S = pi.shape[1]
    Dp_arr = np.zeros((N + 1, S))
    cdef double[:, ::1] Dp = Dp_arr
    cdef Py_ssize_t n, s
    cdef int a
    cdef idx_t t
    cdef double d
    Dp[0, s_init] = 1.0
    with nogil:
        for n in range(N):
            Dp[n, goal] = 0.0
            for s in range(S):
                d = Dp[n, s]
                if d == 0.0:
                    continue
                for a in range(4):
                    t = nbr[s, a]
                    if t >= 0:
                        Dp[n + 1, t] += d * pi[n, s, a]
        Dp[N, goal] = 0.0
    return Dp_arr


def sample_plans(const double[:, :, ::1] pi, const idx_t[:, ::1] nbr, Py_ssize_t s_init, const double[:, ::1] uniforms):
    cdef Py_ssize_t M = uniforms.shape[0], N = uniforms.shape[1]
    cdef int A = pi.shape[2]
    cells_arr = np.full((M, N), -1, dtype=np.int64)
    lengths_arr = np.full(M, N, dtype=np.int64)
    cdef idx_t[:, ::1] cells = cells_arr
    cdef idx_t[::1] lengths = lengths_arr
    cdef Py_ssize_t i, n
    cdef idx_t st
    cdef int a, chosen, last
    cdef double cum, u
    with nogil:
        for i in range(M):
            st = s_init
            for n in range(N):
                cells[i, n] = st
                u = uniforms[i, n]
                cum = 0.0
                chosen = -1
                last = -1
                for a in range(A):
                    if pi[n, st, a] > 0.0:
                        last = a
                    cum += pi[n, st, a]
                    if chosen < 0 and cum > u:
                        chosen = a
                if chosen < 0:
                    chosen = last
                if chosen == A - 1 or chosen < 0:
                    lengths[i] = n + 1
                    break
                st = nbr[st, chosen]
    return cells_arr, lengths_arr


def assign_nearest(const double[:, ::1] x, const double[:, ::1] centers):
    cdef Py_ssize_t U = x.shape[0], K = centers.shape[0], D = x.shape[1]
    labels_arr = np.empty(U, dtype=np.int64)
    best_arr = np.empty(U)
    cdef idx_t[::1] labels = labels_arr
    cdef double[::1] best = best_arr
    cdef Py_ssize_t i, k, j
    cdef double d2, diff, b
    cdef idx_t bk
    with nogil:
        for i in range(U):
            b = INFINITY
            bk = 0
            for k in range(K):
                d2 = 0.0
                for j in range(D):
                    diff = x[i, j] - centers[k, j]
                    d2 += diff * diff
                if d2 < b:
                    b = d2
                    bk = k
            labels[i] = bk
            best[i] = b
    return labels_arr, best_arr
