"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Both implementations follow the same update order, damping and tie-breaking,
so results agree to rounding error.
"""

import numpy as np


def _logsumexp(x, axis):
    # max-shifted; scipy.special.logsumexp has ~50us of call overhead on 4x4 inputs
    top = x.max(axis=axis, keepdims=True)
    return np.squeeze(top, axis) + np.log(np.exp(x - top).sum(axis=axis))


def _dual(C, f, g, reg, a, b):
    with np.errstate(over="ignore"):
        return a * f.sum() + b * g.sum() - reg * np.exp((f[:, None] + g[None, :] - C) / reg).sum()


def sinkhorn_log(cost, reg, max_iters, tol, omega=1.0, newton_after=10):
    C = np.ascontiguousarray(cost, dtype=np.float64)
    n, m = C.shape
    k = n + m - 1
    log_a, log_b = -np.log(n), -np.log(m)
    a, b = 1.0 / n, 1.0 / m
    f = np.zeros(n)
    g = np.zeros(m)
    best_f, best_g, best_err = f.copy(), g.copy(), np.inf
    n_iter = 0
    converged = False
    P = np.exp((f[:, None] + g[None, :] - C) / reg)
    for it in range(max_iters):
        newton_ok = False
        if newton_after >= 0 and it >= newton_after:
            rs, cs = P.sum(axis=1), P.sum(axis=0)
            r = np.concatenate([a - rs, b - cs[:m - 1]])
            J = np.zeros((k, k))
            J[:n, :n] = np.diag(rs / reg)
            J[n:, n:] = np.diag(cs[:m - 1] / reg)
            J[:n, n:] = P[:, :m - 1] / reg
            J[n:, :n] = P[:, :m - 1].T / reg
            J[np.diag_indices(k)] += 1e-12 * np.max(np.diag(J))
            try:
                d = np.linalg.solve(J, r)
            except np.linalg.LinAlgError:
                d = None
            if d is not None:
                slope = r @ d
                phi = _dual(C, f, g, reg, a, b)
                t = 1.0
                for _ in range(40):
                    f2 = f + t * d[:n]
                    g2 = g.copy()
                    g2[:m - 1] += t * d[n:]
                    if _dual(C, f2, g2, reg, a, b) >= phi + 1e-4 * t * slope:
                        newton_ok = True
                        break
                    t *= 0.5
                if newton_ok:
                    f, g = f2, g2
        if not newton_ok:
            f = (1.0 - omega) * f + omega * (reg * log_a - reg * _logsumexp((g[None, :] - C) / reg, 1))
            g = (1.0 - omega) * g + omega * (reg * log_b - reg * _logsumexp((f[:, None] - C) / reg, 0))
        P = np.exp((f[:, None] + g[None, :] - C) / reg)
        err = max(float(np.max(np.abs(P.sum(axis=1) - a))), float(np.max(np.abs(P.sum(axis=0) - b))))
        n_iter = it + 1
        if err < best_err:
            best_err, best_f, best_g = err, f.copy(), g.copy()
        if err < tol:
            converged = True
            break
    plan = np.exp((best_f[:, None] + best_g[None, :] - C) / reg)
    return plan, n_iter, best_err, converged


def dtw(local_cost):
    D = np.ascontiguousarray(local_cost, dtype=np.float64)
    n, m = D.shape
    A = np.empty((n, m))
    A[0, :] = np.cumsum(D[0, :])
    A[:, 0] = np.cumsum(D[:, 0])
    for i in range(1, n):
        prev = A[i - 1]
        row = A[i]
        drow = D[i]
        for j in range(1, m):
            row[j] = drow[j] + min(prev[j - 1], prev[j], row[j - 1])

    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, up, left = A[i - 1, j - 1], A[i - 1, j], A[i, j - 1]
            if diag <= up and diag <= left:
                i, j = i - 1, j - 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
        path.append((i, j))
    return float(A[n - 1, m - 1]), np.array(path[::-1], dtype=np.int64)
