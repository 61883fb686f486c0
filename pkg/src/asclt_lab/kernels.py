"""Compiled replay of the transform / least-squares recursion over a whole stream.

Same order of evaluation as ``TransformState.advance`` plus ``LSState.update``:
pre-update ``V``, ``g``, residual; Sherman-Morrison update with periodic
refresh; post-update ``h`` and estimation error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .linalg import DEFAULT_REFRESH_INTERVAL, as_sym_matrix, check_positive_definite

F, V, G, H, LOG_DET, RESID, PROJ = range(7)
N_SCALAR_COLS = 7


@njit(cache=True)
def _factor(S):
    chol = np.linalg.cholesky(S)
    log_det = 0.0
    for i in range(S.shape[0]):
        log_det += 2.0 * np.log(chol[i, i])
    inv = np.linalg.inv(S)
    return 0.5 * (inv + inv.T), log_det


@njit(cache=True)
def _replay(phi, eps, x_next, S0, M0, theta, u, refresh_interval, cols, err):
    n, d = phi.shape
    S = S0.copy()
    S_inv, log_det = _factor(S)
    M = M0.copy()
    b = np.zeros(d)
    w = np.zeros(d)
    z = np.zeros(d)
    usu = 0.0
    for i in range(d):
        for j in range(d):
            usu += u[i] * S[i, j] * u[j]
    since = 0
    for k in range(n):
        p = phi[k]
        # w = S_{k-1}^{-1} M, z = S_{k-1}^{-1} phi
        for i in range(d):
            wi = 0.0
            zi = 0.0
            for j in range(d):
                wi += S_inv[i, j] * M[j]
                zi += S_inv[i, j] * p[j]
            w[i] = wi
            z[i] = zi
        Vk = 0.0
        gk = 0.0
        c = 0.0
        pred = 0.0
        uM = 0.0
        for i in range(d):
            Vk += M[i] * w[i]
            gk += w[i] * p[i]
            c += p[i] * z[i]
            uM += u[i] * M[i]
            th = 0.0
            for j in range(d):
                th += S_inv[i, j] * b[j]
            pred += th * p[i]
        ld_before = log_det
        if c < 0.0:
            S_inv, log_det = _factor(S)
            since = 0
            c = 0.0
            for i in range(d):
                zi = 0.0
                for j in range(d):
                    zi += S_inv[i, j] * p[j]
                z[i] = zi
                c += p[i] * zi
        for i in range(d):
            for j in range(d):
                S[i, j] += p[i] * p[j]
                S_inv[i, j] -= z[i] * z[j] / (1.0 + c)
        log_det += np.log1p(c)
        since += 1
        if since >= refresh_interval:
            S_inv, log_det = _factor(S)
            since = 0
        log_det = max(log_det, ld_before)
        hk = 0.0
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += S_inv[i, j] * M[j]
            hk += M[i] * acc
        cols[k, F] = c / (1.0 + c)
        cols[k, V] = Vk
        cols[k, G] = gk
        cols[k, H] = hk
        cols[k, LOG_DET] = log_det
        cols[k, RESID] = x_next[k] - pred
        cols[k, PROJ] = uM / np.sqrt(usu)
        for i in range(d):
            M[i] += p[i] * eps[k]
            b[i] += p[i] * x_next[k]
        up = 0.0
        for i in range(d):
            up += u[i] * p[i]
        usu += up * up
        # error of the post-update estimate theta_hat_{k+1} = S_k^{-1} b
        for i in range(d):
            th = 0.0
            for j in range(d):
                th += S_inv[i, j] * b[j]
            err[k, i] = th - theta[i]
    return S, S_inv, log_det, M


@dataclass
class Replay:
    """Per-step columns of a replayed stream.

    Row ``k`` of ``cols`` holds ``f_k, V_k, g_k, h_k, log d_k``, the one-step
    prediction residual ``x_{k+1} - theta_hat_k^T phi_k`` and the projection
    ``u^T M_k / sqrt(u^T S_{k-1} u)``.  Row ``k`` of ``err`` is
    ``theta_hat_{k+1} - theta``.
    """

    cols: np.ndarray
    err: np.ndarray
    S: np.ndarray
    S_inv: np.ndarray
    log_det: float
    log_det0: float
    M: np.ndarray

    @property
    def f(self):
        return self.cols[:, F]

    @property
    def V(self):
        return self.cols[:, V]

    @property
    def g(self):
        return self.cols[:, G]

    @property
    def h(self):
        return self.cols[:, H]

    @property
    def a1(self):
        return self.cols[:, V] - self.cols[:, H]

    @property
    def log_dets(self):
        return self.cols[:, LOG_DET]

    @property
    def resid(self):
        return self.cols[:, RESID]

    @property
    def proj(self):
        return self.cols[:, PROJ]


def replay(
    phi,
    eps,
    x_next=None,
    S0=None,
    M0=None,
    theta=None,
    direction=None,
    refresh_interval: int = DEFAULT_REFRESH_INTERVAL,
) -> Replay:
    """Run the transform (and the LS estimator when ``x_next`` is given) over a stream.

    Defaults: ``S0 = I``, ``M0 = 0``, ``theta = 0``, first coordinate axis as
    the projection direction.
    """
    phi = np.ascontiguousarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    n, d = phi.shape
    eps = np.ascontiguousarray(eps, dtype=float).reshape(-1)
    if eps.shape[0] != n:
        raise ValueError("phi and eps lengths differ")
    x_next = np.zeros(n) if x_next is None else np.ascontiguousarray(x_next, dtype=float).reshape(-1)
    S0 = np.eye(d) if S0 is None else as_sym_matrix(S0, "S0")
    chol = check_positive_definite(S0, "S0")
    log_det0 = 2.0 * float(np.sum(np.log(np.diag(chol))))
    M0 = np.zeros(d) if M0 is None else np.asarray(M0, dtype=float).reshape(-1)
    theta = np.zeros(d) if theta is None else np.asarray(theta, dtype=float).reshape(-1)
    u = np.eye(d)[0] if direction is None else np.asarray(direction, dtype=float).reshape(-1)
    u = u / np.linalg.norm(u)
    for name, arr in (("phi", phi), ("eps", eps), ("x_next", x_next)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} has non-finite entries")
    cols = np.empty((n, N_SCALAR_COLS))
    err = np.empty((n, d))
    S, S_inv, log_det, M = _replay(phi, eps, x_next, S0, M0, theta, u, int(refresh_interval), cols, err)
    return Replay(cols=cols, err=err, S=S, S_inv=S_inv, log_det=float(log_det), log_det0=log_det0, M=M)
