"""Compiled inner loops for the tilting solver and the tilted sums.

These run once per objective evaluation, thousands of times per estimate, so
they are written against plain arrays and compiled with numba.  Factorizations
are hand-rolled to report failure through flags instead of exceptions.
"""

import math

import numpy as np
from numba import njit

CONVERGED = 0
NO_INTERIOR = 1
MAX_ITER = 2
EPS = 2.220446049250313e-16


@njit(cache=True)
def cholesky(A):
    """Lower Cholesky factor and a success flag."""
    m = A.shape[0]
    L = np.zeros((m, m))
    for j in range(m):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, m):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    return L, True


@njit(cache=True)
def cholesky_solve(L, b):
    m = L.shape[0]
    y = np.empty(m)
    for i in range(m):
        t = b[i]
        for k in range(i):
            t -= L[i, k] * y[k]
        y[i] = t / L[i, i]
    x = np.empty(m)
    for i in range(m - 1, -1, -1):
        t = y[i]
        for k in range(i + 1, m):
            t -= L[k, i] * x[k]
        x[i] = t / L[i, i]
    return x


@njit(cache=True)
def lu(A):
    """Partial-pivoting LU; returns packed factors, permutation, log|det|, ok."""
    m = A.shape[0]
    U = A.copy()
    perm = np.arange(m)
    logdet = 0.0
    for j in range(m):
        p = j
        big = abs(U[j, j])
        for i in range(j + 1, m):
            if abs(U[i, j]) > big:
                big = abs(U[i, j])
                p = i
        if not big > 0.0 or not math.isfinite(big):
            return U, perm, -np.inf, False
        if p != j:
            for k in range(m):
                tmp = U[j, k]
                U[j, k] = U[p, k]
                U[p, k] = tmp
            tp = perm[j]
            perm[j] = perm[p]
            perm[p] = tp
        logdet += math.log(abs(U[j, j]))
        for i in range(j + 1, m):
            U[i, j] /= U[j, j]
            for k in range(j + 1, m):
                U[i, k] -= U[i, j] * U[j, k]
    return U, perm, logdet, True


@njit(cache=True)
def lu_solve(U, perm, B):
    m = U.shape[0]
    n = B.shape[1]
    X = np.empty((m, n))
    for c in range(n):
        y = np.empty(m)
        for i in range(m):
            t = B[perm[i], c]
            for k in range(i):
                t -= U[i, k] * y[k]
            y[i] = t
        for i in range(m - 1, -1, -1):
            t = y[i]
            for k in range(i + 1, m):
                t -= U[i, k] * X[k, c]
            X[i, c] = t / U[i, i]
    return X


@njit(cache=True)
def hull_interior_low_dim(P):
    """Origin strictly inside the convex hull of the rows of P, for m <= 2."""
    T, m = P.shape
    if m == 1:
        lo = np.inf
        hi = -np.inf
        for t in range(T):
            lo = min(lo, P[t, 0])
            hi = max(hi, P[t, 0])
        return lo < 0.0 < hi
    ang = np.empty(T)
    n = 0
    for t in range(T):
        if P[t, 0] != 0.0 or P[t, 1] != 0.0:
            ang[n] = math.atan2(P[t, 1], P[t, 0])
            n += 1
    if n < 3:
        return False
    a = np.sort(ang[:n])
    gap = a[0] + 2.0 * math.pi - a[n - 1]
    for i in range(1, n):
        gap = max(gap, a[i] - a[i - 1])
    return gap < math.pi


@njit(cache=True)
def _state(P, tau):
    T = P.shape[0]
    a = P @ tau
    s = a.max()
    e = np.exp(a - s)
    S = e.sum()
    return e / S, s + math.log(S / T)


@njit(cache=True)
def tilt_newton(P, tau0, tol, max_iter, bound, armijo):
    """Damped Newton on ``mean(exp(P tau))``.

    Returns ``(tau, weights, log_k, iterations, status, log_k_path, |g|)``
    where ``g`` is the weighted moment mean at the returned ``tau``.
    """
    T, m = P.shape
    tau = tau0.copy()
    w, log_k = _state(P, tau)
    path = np.empty(max_iter + 2)
    path[0] = log_k
    n_path = 1
    status = MAX_ITER
    it = 0
    while True:
        g = w @ P
        if math.sqrt(g @ g) <= tol:
            status = CONVERGED
            # one more full step: quadratic convergence puts tau at roundoff
            H = (P * w.reshape(-1, 1)).T @ P
            L, ok = cholesky(H)
            if ok:
                cand = tau - cholesky_solve(L, g)
                w_new, lk_new = _state(P, cand)
                g_new = w_new @ P
                if g_new @ g_new < g @ g and math.isfinite(lk_new):
                    tau = cand
                    w = w_new
                    log_k = lk_new
                    path[n_path] = log_k
                    n_path += 1
                    it += 1
            break
        if it >= max_iter:
            status = MAX_ITER
            break
        H = (P * w.reshape(-1, 1)).T @ P
        L, ok = cholesky(H)
        if not ok:
            tr = 0.0
            for i in range(m):
                tr += H[i, i]
            for i in range(m):
                H[i, i] += 1e-12 * tr / m
            L, ok = cholesky(H)
            if not ok:
                status = NO_INTERIOR
                break
        d = -cholesky_solve(L, g)
        finite = True
        for i in range(m):
            if not math.isfinite(d[i]):
                finite = False
        if not finite:
            status = NO_INTERIOR
            break
        slope = g @ d
        alpha = 1.0
        accepted = False
        while alpha >= 1e-14:
            cand = tau + alpha * d
            w_new, lk_new = _state(P, cand)
            if math.exp(lk_new - log_k) <= 1.0 + armijo * alpha * slope:
                accepted = True
                break
            # below roundoff in ln K the decrease test is blind; fall back to |g|
            if lk_new - log_k <= 8.0 * EPS * (1.0 + abs(log_k)):
                g_new = w_new @ P
                if g_new @ g_new < g @ g:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            status = MAX_ITER
            break
        tau = cand
        w = w_new
        log_k = lk_new
        path[n_path] = log_k
        n_path += 1
        it += 1
        if math.sqrt(tau @ tau) > bound or log_k < -745.0:
            status = NO_INTERIOR
            break
    g = w @ P
    return tau, w, log_k, it, status, path[:n_path].copy(), math.sqrt(g @ g)


@njit(cache=True)
def tilted_sums(P, D, tau, w):
    """Log-determinants and sandwich built from the tilted sums.

    Returns ``(ok, ld_v, ld_j, sigma, ld_a, ld_b, shift)`` where ``V`` and ``J``
    use normalized weights and ``A``, ``B`` are the unnormalized averages
    ``(1/T) sum e^{tau'psi_t - shift} (.)``.
    """
    T, m = P.shape
    J = np.zeros((m, m))
    V = np.zeros((m, m))
    A = np.zeros((m, m))
    B = np.zeros((m, m))
    a = P @ tau
    shift = a.max()
    for t in range(T):
        e = math.exp(a[t] - shift) / T
        for i in range(m):
            for j in range(m):
                J[i, j] += w[t] * D[t, i, j]
                A[i, j] += e * D[t, i, j]
                pp = P[t, i] * P[t, j]
                V[i, j] += w[t] * pp
                B[i, j] += e * pp
    sigma = np.zeros((m, m))
    Lv, ok_v = cholesky(V)
    Uj, pj, ld_j, ok_j = lu(J)
    Lb, ok_b = cholesky(B)
    Ua, pa, ld_a, ok_a = lu(A)
    if not (ok_v and ok_j and ok_b and ok_a):
        return False, np.inf, -np.inf, sigma, -np.inf, -np.inf, shift
    ld_v = 0.0
    ld_b = 0.0
    for i in range(m):
        ld_v += 2.0 * math.log(Lv[i, i])
        ld_b += 2.0 * math.log(Lb[i, i])
    X = lu_solve(Uj, pj, V)
    S = lu_solve(Uj, pj, X.T.copy())
    for i in range(m):
        for j in range(m):
            sigma[i, j] = 0.5 * (S[i, j] + S[j, i])
    return True, ld_v, ld_j, sigma, ld_a, ld_b, shift
