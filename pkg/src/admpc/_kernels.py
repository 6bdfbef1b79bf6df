"""Numeric inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``ADMPC_DISABLE_NUMBA`` is unset (or ``0``). Both paths compute the
same quantities; ``benchmarks/bench_kernels.py`` times them against each other.
"""
import os

import numpy as np

_flag = os.environ.get("ADMPC_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA


# -- numpy reference implementations -------------------------------------------


def riccati_iterate_np(A, B, Q, R, max_iter=100000, tol=1e-13):
    """Value iteration P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA from P = Q."""
    P = Q.copy()
    for k in range(max_iter):
        BtP = B.T @ P
        G = R + BtP @ B
        P_next = Q + A.T @ P @ A - (BtP @ A).T @ np.linalg.solve(G, BtP @ A)
        P_next = 0.5 * (P_next + P_next.T)
        diff = np.max(np.abs(P_next - P))
        P = P_next
        if diff <= tol * max(1.0, np.max(np.abs(P))):
            return P, k + 1
    return P, max_iter


def rollout_np(A, B, x0, U):
    """States x_0..x_N of x+ = Ax + Bu for an input sequence U (N x m)."""
    N = U.shape[0]
    X = np.empty((N + 1, x0.shape[0]))
    X[0] = x0
    for t in range(N):
        X[t + 1] = A @ X[t] + B @ U[t]
    return X


def quad_rows_np(X, P):
    """Row-wise quadratic forms x_k' P x_k."""
    return np.einsum("ki,ij,kj->k", X, P, X)


def max_affine_violation_np(C, c, X):
    """max over samples and rows of C x - c (``-inf`` for no rows)."""
    if C.shape[0] == 0 or X.shape[0] == 0:
        return -np.inf
    return float(np.max(X @ C.T - c[None, :]))


# -- numba implementations -----------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _riccati_iterate_nb(A, B, Q, R, max_iter, tol):
        P = Q.copy()
        for k in range(max_iter):
            BtP = B.T @ P
            G = R + BtP @ B
            BtPA = BtP @ A
            P_next = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(G, BtPA)
            P_next = 0.5 * (P_next + P_next.T)
            diff = np.max(np.abs(P_next - P))
            P = P_next
            if diff <= tol * max(1.0, np.max(np.abs(P))):
                return P, k + 1
        return P, max_iter

    @njit(cache=True)
    def _rollout_nb(A, B, x0, U):
        N = U.shape[0]
        n = x0.shape[0]
        X = np.empty((N + 1, n))
        X[0] = x0
        for t in range(N):
            X[t + 1] = A @ X[t] + B @ U[t]
        return X

    @njit(cache=True)
    def _quad_rows_nb(X, P):
        K, n = X.shape
        out = np.empty(K)
        for k in range(K):
            acc = 0.0
            for i in range(n):
                xi = X[k, i]
                if xi == 0.0:
                    continue
                row = 0.0
                for j in range(n):
                    row += P[i, j] * X[k, j]
                acc += xi * row
            out[k] = acc
        return out

    @njit(cache=True)
    def _max_affine_violation_nb(C, c, X):
        worst = -np.inf
        for k in range(X.shape[0]):
            for r in range(C.shape[0]):
                v = -c[r]
                for j in range(C.shape[1]):
                    v += C[r, j] * X[k, j]
                if v > worst:
                    worst = v
        return worst


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def riccati_iterate(A, B, Q, R, max_iter=100000, tol=1e-13):
    """Fixed-point DARE iteration; returns (P, iterations used)."""
    if USE_NUMBA:
        return _riccati_iterate_nb(_f64(A), _f64(B), _f64(Q), _f64(R), max_iter, tol)
    return riccati_iterate_np(_f64(A), _f64(B), _f64(Q), _f64(R), max_iter, tol)


def rollout(A, B, x0, U):
    U = _f64(np.atleast_2d(U))
    if USE_NUMBA:
        return _rollout_nb(_f64(A), _f64(B), _f64(x0), U)
    return rollout_np(_f64(A), _f64(B), _f64(x0), U)


def quad_rows(X, P):
    if USE_NUMBA:
        return _quad_rows_nb(_f64(X), _f64(P))
    return quad_rows_np(_f64(X), _f64(P))


def max_affine_violation(C, c, X):
    C = _f64(np.atleast_2d(C))
    if C.shape[0] == 0 or len(X) == 0:
        return -np.inf
    if USE_NUMBA:
        return float(_max_affine_violation_nb(C, _f64(c), _f64(X)))
    return max_affine_violation_np(C, _f64(c), _f64(X))
