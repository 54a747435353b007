"""Hot loops for fitting canonical GLMs by Newton / Fisher scoring.

Every Monte-Carlo replicate fits several small logistic models, so the
iteration below dominates simulation runtime. When numba is importable and
the ``TRIAL_ADJUST_JIT`` environment variable is not set to a false value
(``0``, ``false``, ``no``, ``off``), the kernels are compiled with
``numba.njit``. Otherwise the identical source runs on plain numpy, with the
two small linear-algebra helpers swapped for LAPACK-backed equivalents.

The flag is read once, at import time.
"""

import os

import numpy as np

LOGIT = 0
POISSON = 1

CONVERGED = 0
MAX_ITER = 1
SINGULAR = 2
DIVERGING = 3
STALLED = 4

# Schur-complement pivot / original diagonal below this ratio => rank deficient.
RANK_TOL = 1e-10
MAX_HALVING = 30
# after the convergence tolerance is met, keep iterating (at most this many
# times) until the change falls below tol * POLISH_FACTOR
POLISH_STEPS = 25
POLISH_FACTOR = 1e-4
# extra iterations allowed after the deviance stalls before an MLE fit is
# declared divergent (separated data)
STALL_STEPS = 10


def _jit_requested():
    flag = os.environ.get("TRIAL_ADJUST_JIT", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _jit_requested()


# --- linear algebra: loop versions (compiled) -------------------------------

def _cholesky_loops(a, rank_tol):
    p = a.shape[0]
    L = np.zeros((p, p))
    for j in range(p):
        s = a[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if a[j, j] <= 0.0 or s <= rank_tol * a[j, j]:
            return L, False
        d = np.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, p):
            t = a[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / d
    return L, True


def _lower_solve_loops(L, b):
    # b: (p, m); solves L x = b column by column
    p, m = b.shape
    out = np.empty((p, m))
    for c in range(m):
        for i in range(p):
            t = b[i, c]
            for k in range(i):
                t -= L[i, k] * out[k, c]
            out[i, c] = t / L[i, i]
    return out


def _chol_solve_loops(L, v):
    p = v.shape[0]
    z = np.empty(p)
    for i in range(p):
        t = v[i]
        for k in range(i):
            t -= L[i, k] * z[k]
        z[i] = t / L[i, i]
    x = np.empty(p)
    for i in range(p - 1, -1, -1):
        t = z[i]
        for k in range(i + 1, p):
            t -= L[k, i] * x[k]
        x[i] = t / L[i, i]
    return x


# --- linear algebra: numpy versions (fallback) ------------------------------

def _cholesky_np(a, rank_tol):
    d = np.diag(a)
    if np.any(d <= 0.0):
        return np.zeros_like(a), False
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return np.zeros_like(a), False
    if np.any(np.diag(L) ** 2 <= rank_tol * d):
        return L, False
    return L, True


def _lower_solve_np(L, b):
    from scipy.linalg import solve_triangular

    return solve_triangular(L, b, lower=True, check_finite=False)


def _chol_solve_np(L, v):
    from scipy.linalg import cho_solve

    return cho_solve((L, True), v, check_finite=False)


if USE_NUMBA:
    _jit = numba.njit(cache=True)
    cholesky = _jit(_cholesky_loops)
    lower_solve = _jit(_lower_solve_loops)
    chol_solve = _jit(_chol_solve_loops)
else:
    def _jit(f):
        return f

    cholesky = _cholesky_np
    lower_solve = _lower_solve_np
    chol_solve = _chol_solve_np


# --- family pieces ------------------------------------------------------------

def _mean_deriv(eta, family):
    """Mean and its first derivative in the linear predictor."""
    if family == LOGIT:
        e = np.exp(-np.abs(eta))
        m = np.where(eta >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
        return m, m * (1.0 - m)
    m = np.exp(np.minimum(eta, 700.0))
    return m, m.copy()


def _curvature_ratio(m, family):
    """m''/m' expressed through the mean."""
    if family == LOGIT:
        return 1.0 - 2.0 * m
    return np.ones_like(m)


def _loglik(y, eta, family):
    if family == LOGIT:
        return np.sum(y * eta - (np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta)))))
    return np.sum(y * eta - np.exp(np.minimum(eta, 700.0)))


def _deviance(y, eta, m, family):
    if family == LOGIT:
        return -2.0 * _loglik(y, eta, family)
    ylogy = np.where(y > 0.0, y * np.log(np.maximum(y, 1e-300)), 0.0)
    return 2.0 * np.sum(ylogy - y * eta - (y - m))


def _information(X, w):
    n = X.shape[0]
    return X.T @ (X * w.reshape((n, 1)))


def _hat_from_chol(X, w, L):
    n = X.shape[0]
    A = (X * np.sqrt(w).reshape((n, 1))).T.copy()
    Q = lower_solve(L, A)
    return np.sum(Q * Q, axis=0)


def _objective(y, eta, L, family, firth):
    val = _loglik(y, eta, family)
    if firth:
        val += np.sum(np.log(np.diag(L)))
    return val


def _relative_change(new, old):
    return np.max(np.abs(new - old) / (np.abs(new) + 0.1))


def _newton(X, y, family, firth, beta0, tol, max_iter):
    """Maximise the (Firth-penalised) log-likelihood.

    Returns ``(beta, iterations, status)``. The step is the expected-information
    Newton step on the (modified) score, halved until the objective does not
    decrease. MLE fits whose deviance stalls while the coefficients keep
    moving are stopped at the stall point and reported as ``DIVERGING``.
    """
    beta = beta0.copy()
    eta = X @ beta
    m, w = _mean_deriv(eta, family)
    L, ok = cholesky(_information(X, w), RANK_TOL)
    if not ok:
        return beta, 0, SINGULAR
    obj = _objective(y, eta, L, family, firth)
    dev = _deviance(y, eta, m, family)

    status = MAX_ITER
    it = 0
    polish_left = POLISH_STEPS
    stall_beta = beta.copy()
    stall_it = -1
    while it < max_iter:
        it += 1
        score = X.T @ (y - m)
        if firth:
            h = _hat_from_chol(X, w, L)
            score = score + 0.5 * (X.T @ (h * _curvature_ratio(m, family)))
        step = chol_solve(L, score)

        t = 1.0
        accepted = False
        beta_new = beta
        eta_new = eta
        m_new = m
        w_new = w
        L_new = L
        obj_new = obj
        for _ in range(MAX_HALVING):
            beta_new = beta + t * step
            eta_new = X @ beta_new
            m_new, w_new = _mean_deriv(eta_new, family)
            L_new, ok_new = cholesky(_information(X, w_new), RANK_TOL)
            if ok_new:
                obj_new = _objective(y, eta_new, L_new, family, firth)
                if obj_new >= obj - 1e-12 * (abs(obj) + 1.0):
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            if _relative_change(beta + step, beta) < tol:
                status = CONVERGED
            else:
                status = STALLED
            break

        change = _relative_change(beta_new, beta)
        dev_new = _deviance(y, eta_new, m_new, family)
        dev_stalled = abs(dev_new - dev) / (abs(dev_new) + 0.1) < tol
        beta, eta, m, w, L, obj, dev = beta_new, eta_new, m_new, w_new, L_new, obj_new, dev_new

        if change < tol:
            status = CONVERGED
            if change < tol * POLISH_FACTOR or polish_left == 0:
                break
            polish_left -= 1
            continue
        if status == CONVERGED:
            # a polishing step moved more than tol; accept the current iterate
            break
        if not firth:
            if stall_it < 0 and dev_stalled:
                stall_it = it
                stall_beta = beta.copy()
            if stall_it >= 0 and it - stall_it >= STALL_STEPS:
                return stall_beta, stall_it, DIVERGING
    return beta, it, status


def _hat_values(X, w):
    L, ok = cholesky(_information(X, w), RANK_TOL)
    if not ok:
        return np.full(X.shape[0], np.nan), False
    return _hat_from_chol(X, w, L), True


_mean_deriv = _jit(_mean_deriv)
_curvature_ratio = _jit(_curvature_ratio)
_loglik = _jit(_loglik)
_deviance = _jit(_deviance)
_information = _jit(_information)
_hat_from_chol = _jit(_hat_from_chol)
_objective = _jit(_objective)
_relative_change = _jit(_relative_change)
newton = _jit(_newton)
hat_values = _jit(_hat_values)
