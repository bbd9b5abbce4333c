"""Independent reference computations used by the tests."""

import itertools
import math

import numpy as np


def exact_ot(C):
    """Minimum of Tr[P C^T] over permutation couplings scaled by 1/N (vertices of the uniform polytope)."""
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


def monotone_paths(n, m):
    """Every path from (0, 0) to (n-1, m-1) with steps (1,0), (0,1), (1,1)."""
    def walk(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                for rest in walk(a, b):
                    yield [(i, j)] + rest

    return list(walk(0, 0))


def brute_dtw(local_cost):
    local_cost = np.asarray(local_cost)
    n, m = local_cost.shape
    return min(sum(local_cost[i, j] for i, j in p) for p in monotone_paths(n, m))


def dft_magnitude(x):
    """|DFT| of a real sequence at bins 0..len//2 by explicit summation."""
    L = len(x)
    return np.array([abs(sum(x[t] * complex(math.cos(2 * math.pi * k * t / L), -math.sin(2 * math.pi * k * t / L))
                             for t in range(L))) for k in range(L // 2 + 1)])


def hann(L):
    # symmetric Hann, as numpy.hanning
    return np.array([0.5 - 0.5 * math.cos(2 * math.pi * t / (L - 1)) for t in range(L)])


def log_modulation(traj, starts, seg):
    w = hann(seg)
    mags = [dft_magnitude(np.asarray(traj[s:s + seg]) * w) for s in starts]
    return np.log(np.mean(mags, axis=0) + 1e-10)
