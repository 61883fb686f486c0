"""Exact-algebra identity suite and dense-oracle equivalence on small random instances."""
from __future__ import annotations

import math
import time

import numpy as np

from .estimators import LSState
from .linalg import GramState
from .martingale import ROUNDING_FLOOR, check_step_identities, limit_diagnostics

IDENTITY_TOL = 1e-8
# the pi form goes through x - theta_hat^T phi - eps and is reported, not judged
INFORMATIONAL = ("riccati_pi",)
ORACLE_TOL = 1e-9


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return 0.0 if scale == 0 else float(np.max(np.abs(a - b))) / scale


def identity_suite(n_steps: int = 10_000, dims=(1, 2, 4), seed: int = 0) -> dict:
    """Worst relative residual of each per-step identity along random streams.

    Identities: ``a1 = (1-f) g^2`` and ``a1 = (1-f) pi^2``; ``f = 1 - d_{n-1}/d_n``;
    ``theta_hat_n - theta = S_{n-1}^{-1} M_n``; the one-step recursion of
    ``m_n = M^T L^{-1} M / beta_{n-1}``.
    """
    rng = np.random.default_rng(seed)
    worst = {"riccati_g": 0.0, "riccati_pi": 0.0, "determinant": 0.0, "difference": 0.0, "m_recursion": 0.0}
    t0 = time.perf_counter()
    for d in dims:
        theta = rng.normal(size=d)
        A = rng.normal(size=(d, d))
        L = A @ A.T + d * np.eye(d)
        L_inv = np.linalg.inv(L)
        state = LSState.start(np.eye(d), true_theta=theta)
        tr = state.transform
        beta_prev = float(np.trace(L_inv @ state.gram.S))
        m_pred = None
        for k in range(n_steps):
            phi = rng.normal(size=d)
            eps = rng.normal()
            x = float(theta @ phi) + eps
            M_now = tr.M.copy()
            m_now = float(M_now @ L_inv @ M_now) / beta_prev
            if m_pred is not None:
                worst["m_recursion"] = max(worst["m_recursion"], _rel(m_now, m_pred))
            diag = limit_diagnostics(tr, L, phi, alpha_n=k + 1)
            ld_prev = state.gram.log_det
            _, rec = state.update(phi, x)
            for label, r in check_step_identities(rec):
                key = "riccati_pi" if "pi" in label else "riccati_g"
                worst[key] = max(worst[key], r)
            # d_{n-1}/d_n from the log-determinant increment; its rounding error is discounted
            f_det = -math.expm1(-(rec.log_det - ld_prev))
            floor = ROUNDING_FLOOR * (abs(rec.log_det) + abs(ld_prev))
            worst["determinant"] = max(worst["determinant"], max(abs(rec.f - f_det) - floor, 0.0) / rec.f)
            diff = state.theta_error
            worst["difference"] = max(worst["difference"], _rel(diff, state.gram.S_inv @ tr.M))
            # m_{n+1} = (1 - gamma) m + 2 delta eps + gamma eps^2
            m_pred = (1 - diag.gamma) * diag.m + 2 * diag.delta * eps + diag.gamma * eps * eps
            beta_prev = diag.beta
    return {"residuals": worst, "tol": IDENTITY_TOL, "seconds": time.perf_counter() - t0,
            "passed": all(v <= IDENTITY_TOL for k, v in worst.items() if k not in INFORMATIONAL)}


def oracle_suite(max_dim: int = 5, n_steps: int = 500, seed: int = 1) -> dict:
    """Compare rank-one tracking with from-scratch dense computations (LU solve, slogdet)."""
    rng = np.random.default_rng(seed)
    worst = {"inverse": 0.0, "log_det": 0.0, "quadratic": 0.0}
    t0 = time.perf_counter()
    for d in range(1, max_dim + 1):
        A = rng.normal(size=(d, d))
        S0 = A @ A.T + np.eye(d)
        gram = GramState.from_matrix(S0)
        phis = rng.normal(size=(n_steps, d)) * rng.uniform(0.1, 3.0, size=(n_steps, 1))
        for k in range(n_steps):
            gram.rank_one_update(phis[k])
            if k % 25 and k != n_steps - 1:
                continue
            S = S0 + phis[: k + 1].T @ phis[: k + 1]
            inv = np.linalg.solve(S, np.eye(d))
            worst["inverse"] = max(worst["inverse"], _rel(gram.S_inv, inv))
            _, ld = np.linalg.slogdet(S)
            worst["log_det"] = max(worst["log_det"], abs(gram.log_det - ld) / max(1.0, abs(ld)))
            x = rng.normal(size=d)
            worst["quadratic"] = max(worst["quadratic"], _rel(gram.quadratic_form(x), x @ np.linalg.solve(S, x)))
    return {"residuals": worst, "tol": ORACLE_TOL, "seconds": time.perf_counter() - t0,
            "passed": all(v <= ORACLE_TOL for v in worst.values())}
