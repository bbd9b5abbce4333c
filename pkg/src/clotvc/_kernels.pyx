# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: log-domain Sinkhorn on small dense costs and DTW."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs, INFINITY

cnp.import_array()


cdef inline double _lse_row(const double[:, ::1] C, const double[::1] g,
                            Py_ssize_t i, double reg) noexcept nogil:
    cdef Py_ssize_t j, m = C.shape[1]
    cdef double mx = -INFINITY, v, s = 0.0
    for j in range(m):
        v = (g[j] - C[i, j]) / reg
        if v > mx:
            mx = v
    for j in range(m):
        s += exp((g[j] - C[i, j]) / reg - mx)
    return mx + log(s)


cdef inline double _lse_col(const double[:, ::1] C, const double[::1] f,
                            Py_ssize_t j, double reg) noexcept nogil:
    cdef Py_ssize_t i, n = C.shape[0]
    cdef double mx = -INFINITY, v, s = 0.0
    for i in range(n):
        v = (f[i] - C[i, j]) / reg
        if v > mx:
            mx = v
    for i in range(n):
        s += exp((f[i] - C[i, j]) / reg - mx)
    return mx + log(s)


cdef int _solve(double[:, ::1] A, double[::1] x, Py_ssize_t k) noexcept nogil:
    """Gaussian elimination with partial pivoting; solution overwrites ``x``."""
    cdef Py_ssize_t r, c, p, piv
    cdef double big, t
    for c in range(k):
        piv = c
        big = fabs(A[c, c])
        for r in range(c + 1, k):
            if fabs(A[r, c]) > big:
                big = fabs(A[r, c])
                piv = r
        if big == 0.0:
            return 1
        if piv != c:
            for p in range(k):
                t = A[c, p]
                A[c, p] = A[piv, p]
                A[piv, p] = t
            t = x[c]
            x[c] = x[piv]
            x[piv] = t
        for r in range(c + 1, k):
            t = A[r, c] / A[c, c]
            if t != 0.0:
                for p in range(c, k):
                    A[r, p] -= t * A[c, p]
                x[r] -= t * x[c]
    for c in range(k - 1, -1, -1):
        t = x[c]
        for p in range(c + 1, k):
            t -= A[c, p] * x[p]
        x[c] = t / A[c, c]
    return 0


cdef double _dual(const double[:, ::1] C, const double[::1] f, const double[::1] g,
                  double reg, double a, double b) noexcept nogil:
    cdef Py_ssize_t i, j, n = C.shape[0], m = C.shape[1]
    cdef double val = 0.0, mass = 0.0
    for i in range(n):
        val += a * f[i]
    for j in range(m):
        val += b * g[j]
    for i in range(n):
        for j in range(m):
            mass += exp((f[i] + g[j] - C[i, j]) / reg)
    return val - reg * mass


cdef double _marginal_error(const double[:, ::1] C, const double[::1] f, const double[::1] g,
                            double reg, double a, double b,
                            double[::1] rs, double[::1] cs) noexcept nogil:
    cdef Py_ssize_t i, j, n = C.shape[0], m = C.shape[1]
    cdef double e, err = 0.0
    for j in range(m):
        cs[j] = 0.0
    for i in range(n):
        rs[i] = 0.0
        for j in range(m):
            e = exp((f[i] + g[j] - C[i, j]) / reg)
            rs[i] += e
            cs[j] += e
        if fabs(rs[i] - a) > err:
            err = fabs(rs[i] - a)
    for j in range(m):
        if fabs(cs[j] - b) > err:
            err = fabs(cs[j] - b)
    return err


def sinkhorn_log(cnp.ndarray cost, double reg, int max_iters, double tol,
                 double omega=1.0, int newton_after=10):
    """Return ``(plan, n_iter, marginal_error, converged)`` for uniform marginals.

    Log-domain Sinkhorn sweeps; ``omega`` over-relaxes them (1.0 = plain).
    After ``newton_after`` sweeps (negative disables) unconverged iterates are
    polished with damped Newton steps on the same dual, falling back to a
    sweep whenever the line search fails.  Every sweep or Newton step counts
    as one iteration.
    """
    cdef double[:, ::1] C = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1], i, j, k = n + m - 1
    cdef double log_a = -log(<double>n), log_b = -log(<double>m)
    cdef double a = 1.0 / n, b = 1.0 / m
    cdef double[::1] f = np.zeros(n), g = np.zeros(m)
    cdef double[::1] f2 = np.zeros(n), g2 = np.zeros(m)
    cdef double[::1] best_f = np.zeros(n), best_g = np.zeros(m)
    cdef double[::1] rs = np.zeros(n), cs = np.zeros(m)
    cdef double[::1] d = np.zeros(k), r = np.zeros(k)
    cdef double[:, ::1] J = np.zeros((k, k))
    cdef double err, best_err = INFINITY, e, phi, slope, t, damp
    cdef int it, n_iter = 0, ls
    cdef bint converged = False, newton_ok

    with nogil:
        err = _marginal_error(C, f, g, reg, a, b, rs, cs)
        for it in range(max_iters):
            newton_ok = False
            if newton_after >= 0 and it >= newton_after:
                # residual of the gauge-fixed dual (last column potential held)
                for i in range(n):
                    r[i] = a - rs[i]
                for j in range(m - 1):
                    r[n + j] = b - cs[j]
                damp = 0.0
                for i in range(k):
                    for j in range(k):
                        J[i, j] = 0.0
                for i in range(n):
                    J[i, i] = rs[i] / reg
                    if J[i, i] > damp:
                        damp = J[i, i]
                    for j in range(m - 1):
                        e = exp((f[i] + g[j] - C[i, j]) / reg) / reg
                        J[i, n + j] = e
                        J[n + j, i] = e
                for j in range(m - 1):
                    J[n + j, n + j] = cs[j] / reg
                    if J[n + j, n + j] > damp:
                        damp = J[n + j, n + j]
                damp *= 1e-12
                for i in range(k):
                    J[i, i] += damp
                    d[i] = r[i]
                if _solve(J, d, k) == 0:
                    slope = 0.0
                    for i in range(k):
                        slope += r[i] * d[i]
                    phi = _dual(C, f, g, reg, a, b)
                    t = 1.0
                    for ls in range(40):
                        for i in range(n):
                            f2[i] = f[i] + t * d[i]
                        for j in range(m - 1):
                            g2[j] = g[j] + t * d[n + j]
                        g2[m - 1] = g[m - 1]
                        if _dual(C, f2, g2, reg, a, b) >= phi + 1e-4 * t * slope:
                            newton_ok = True
                            break
                        t *= 0.5
                    if newton_ok:
                        f[:] = f2
                        g[:] = g2
            if not newton_ok:
                for i in range(n):
                    f[i] = (1.0 - omega) * f[i] + omega * (reg * log_a - reg * _lse_row(C, g, i, reg))
                for j in range(m):
                    g[j] = (1.0 - omega) * g[j] + omega * (reg * log_b - reg * _lse_col(C, f, j, reg))
            err = _marginal_error(C, f, g, reg, a, b, rs, cs)
            n_iter = it + 1
            if err < best_err:
                best_err = err
                best_f[:] = f
                best_g[:] = g
            if err < tol:
                converged = True
                break

    plan = np.empty((n, m))
    cdef double[:, ::1] P = plan
    for i in range(n):
        for j in range(m):
            P[i, j] = exp((best_f[i] + best_g[j] - C[i, j]) / reg)
    return plan, n_iter, best_err, bool(converged)


def dtw(cnp.ndarray local_cost):
    """Return ``(total_cost, path)`` for the symmetric three-step pattern."""
    cdef double[:, ::1] D = np.ascontiguousarray(local_cost, dtype=np.float64)
    cdef Py_ssize_t n = D.shape[0], m = D.shape[1], i, j, k
    acc_arr = np.empty((n, m))
    cdef double[:, ::1] A = acc_arr
    cdef double best, diag, up, left

    A[0, 0] = D[0, 0]
    for j in range(1, m):
        A[0, j] = A[0, j - 1] + D[0, j]
    for i in range(1, n):
        A[i, 0] = A[i - 1, 0] + D[i, 0]
        for j in range(1, m):
            best = A[i - 1, j - 1]
            if A[i - 1, j] < best:
                best = A[i - 1, j]
            if A[i, j - 1] < best:
                best = A[i, j - 1]
            A[i, j] = D[i, j] + best

    path_arr = np.empty((n + m - 1, 2), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] path = path_arr
    i = n - 1
    j = m - 1
    k = 0
    path[k, 0] = i
    path[k, 1] = j
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag = A[i - 1, j - 1]
            up = A[i - 1, j]
            left = A[i, j - 1]
            if diag <= up and diag <= left:
                i -= 1
                j -= 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
        k += 1
        path[k, 0] = i
        path[k, 1] = j
    return float(A[n - 1, m - 1]), path_arr[k::-1].copy()
