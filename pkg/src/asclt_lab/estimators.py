"""Least-squares and conditional least-squares estimation with cumulative error functionals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .asclt import target_ell
from .linalg import DEFAULT_REFRESH_INTERVAL, GramState, as_sym_matrix
from .martingale import StepRecord, TransformState
from .models import normalize_branching


@dataclass
class LSState:
    """``theta_hat = S^{-1} b`` with ``b = sum phi_{k-1} x_k``.

    With a known parameter the martingale ``M_n = -S theta + sum phi_{k-1} eps_k``
    is carried along, so ``theta_hat_n - theta = S_{n-1}^{-1} M_n``.
    """

    gram: GramState
    b: np.ndarray
    theta_hat: np.ndarray
    true_theta: np.ndarray | None = None
    transform: TransformState | None = None

    @classmethod
    def start(cls, S0=None, true_theta=None, d: int | None = None,
              refresh_interval: int = DEFAULT_REFRESH_INTERVAL) -> "LSState":
        if S0 is None:
            if d is None:
                d = len(true_theta)
            S0 = np.eye(d)
        gram = GramState.from_matrix(S0, refresh_interval)
        transform = None
        if true_theta is not None:
            true_theta = np.asarray(true_theta, dtype=float).reshape(-1)
            transform = TransformState.start(-gram.S @ true_theta, gram)
        return cls(gram=gram, b=np.zeros(gram.dim), theta_hat=np.zeros(gram.dim),
                   true_theta=true_theta, transform=transform)

    def update(self, phi, x_next: float) -> tuple[float, StepRecord | None]:
        """Consume ``(phi_k, x_{k+1})``; return the residual ``x_{k+1} - theta_hat_k^T phi_k``.

        The step record is returned (with ``pi`` attached) when the true
        parameter is known.
        """
        phi = np.asarray(phi, dtype=float).reshape(-1)
        x_next = float(x_next)
        if not (math.isfinite(x_next) and np.all(np.isfinite(phi))):
            raise ValueError("non-finite input to ls_update")
        residual = x_next - float(self.theta_hat @ phi)
        record = None
        if self.transform is not None:
            eps = x_next - float(self.true_theta @ phi)
            rec = self.transform.advance(phi, eps)
            record = replace(rec, pi=residual - eps)
        else:
            self.gram.rank_one_update(phi)
        self.b = self.b + phi * x_next
        self.theta_hat = self.gram.S_inv @ self.b
        return residual, record

    @property
    def theta_error(self) -> np.ndarray | None:
        return None if self.true_theta is None else self.theta_hat - self.true_theta


def ls_update(state: LSState, phi, x_next: float):
    residual, record = state.update(phi, x_next)
    return state, residual, record


@dataclass
class ErrorLedger:
    """Cumulative prediction / estimation error sums.

    ``C[p]`` sums ``residual^{2p}``; ``G[p]`` sums ``k^{p-1} |err|^{2p}``;
    ``GL[p]`` sums ``k^{p-1} (err^T L err)^p``; ``resid_2q`` / ``eps_2q`` /
    ``pi_2q`` sum even powers for the moment estimators; ``cvmoy[p]`` sums
    ``f_k ((theta_hat_k - theta)^T S_k (theta_hat_k - theta))^p``.
    """

    p_set: tuple = (1, 2)
    q_set: tuple = (1, 2)
    n: int = 0
    C: dict = field(default_factory=dict)
    G: dict = field(default_factory=dict)
    GL: dict = field(default_factory=dict)
    cvmoy: dict = field(default_factory=dict)
    resid_2q: dict = field(default_factory=dict)
    eps_2q: dict = field(default_factory=dict)
    pi_2q: dict = field(default_factory=dict)

    def __post_init__(self):
        for p in self.p_set:
            for table in (self.C, self.G, self.GL, self.cvmoy):
                table.setdefault(p, 0.0)
        for q in self.q_set:
            for table in (self.resid_2q, self.eps_2q, self.pi_2q):
                table.setdefault(q, 0.0)

    def Gamma(self, q: int) -> float:
        return self.resid_2q[q] / self.n if self.n else math.nan

    def Delta(self, q: int) -> float:
        return self.eps_2q[q] / self.n if self.n else math.nan

    def update(self, k: int, residual: float, eps: float, theta_err_norm2: float | None = None,
               theta_err_L: float | None = None, record: StepRecord | None = None) -> "ErrorLedger":
        """Add step ``k`` (1-based): residual of the prediction of ``x_k`` and the error of ``theta_hat_k``."""
        self.n += 1
        pi = residual - eps
        for p in self.p_set:
            self.C[p] += residual ** (2 * p)
            if theta_err_norm2 is not None:
                self.G[p] += k ** (p - 1) * theta_err_norm2**p
            if theta_err_L is not None:
                self.GL[p] += k ** (p - 1) * theta_err_L**p
            if record is not None:
                self.cvmoy[p] += record.f * (record.V + record.g**2) ** p
        for q in self.q_set:
            self.resid_2q[q] += residual ** (2 * q)
            self.eps_2q[q] += eps ** (2 * q)
            self.pi_2q[q] += pi ** (2 * q)
        return self


def update_ledger(ledger: ErrorLedger, k: int, residual: float, eps: float, theta_err, L) -> ErrorLedger:
    """Ledger update from the raw error vector; ``L`` weights the quadratic form."""
    e = np.asarray(theta_err, dtype=float)
    L = as_sym_matrix(L, "L")
    return ledger.update(k, residual, eps, float(e @ e), float(e @ L @ e))


def ledger_checkpoints(resid, eps, err, L, checkpoints, p_set=(1, 2), q_set=(1, 2),
                       f=None, V=None, g=None) -> list[ErrorLedger]:
    """Ledger snapshots at step counts ``checkpoints`` from whole-stream columns.

    ``err[k]`` is the error of ``theta_hat_{k+1}``, so it carries weight index ``k+1``.
    """
    resid = np.asarray(resid, dtype=float)
    eps = np.asarray(eps, dtype=float)
    err = np.asarray(err, dtype=float)
    L = as_sym_matrix(L, "L")
    k = np.arange(1, resid.shape[0] + 1, dtype=float)
    e2 = np.einsum("ij,ij->i", err, err)
    eL = np.einsum("ij,jk,ik->i", err, L, err)
    pi = resid - eps
    cum = {}
    for p in p_set:
        cum["C", p] = np.cumsum(resid ** (2 * p))
        cum["G", p] = np.cumsum(k ** (p - 1) * e2**p)
        cum["GL", p] = np.cumsum(k ** (p - 1) * eL**p)
        if f is not None:
            cum["cvmoy", p] = np.cumsum(f * (V + g * g) ** p)
    for q in q_set:
        cum["r", q] = np.cumsum(resid ** (2 * q))
        cum["e", q] = np.cumsum(eps ** (2 * q))
        cum["pi", q] = np.cumsum(pi ** (2 * q))
    out = []
    for n in checkpoints:
        i = n - 1
        out.append(ErrorLedger(
            p_set=tuple(p_set), q_set=tuple(q_set), n=int(n),
            C={p: float(cum["C", p][i]) for p in p_set},
            G={p: float(cum["G", p][i]) for p in p_set},
            GL={p: float(cum["GL", p][i]) for p in p_set},
            cvmoy={p: float(cum["cvmoy", p][i]) if f is not None else math.nan for p in p_set},
            resid_2q={q: float(cum["r", q][i]) for q in q_set},
            eps_2q={q: float(cum["e", q][i]) for q in q_set},
            pi_2q={q: float(cum["pi", q][i]) for q in q_set},
        ))
    return out


def corollary_report(ledger: ErrorLedger, log_det_norm: float, sigma2: float, d: int,
                     noise_moments: dict | None = None, theta_known: bool = True) -> dict:
    """Prediction and estimation statistics at one checkpoint.

    ``log_det_norm`` is ``log d_n - log det S``; ``noise_moments`` maps ``q``
    to ``sigma(2q)``.  Estimation statistics are NaN without a true parameter,
    and every statistic is NaN when the design has not grown.
    """
    n = ledger.n
    log_n = math.log(n) if n > 1 else math.nan
    out: dict = {"n": n}
    if n == 0 or not log_det_norm > 0:
        out["status"] = "insufficient data"
    else:
        out["status"] = "ok"
    for q in ledger.q_set:
        diff = ledger.Gamma(q) - ledger.Delta(q)
        out[f"Gamma_{2 * q}"] = ledger.Gamma(q)
        out[f"Delta_{2 * q}"] = ledger.Delta(q)
        out[f"estmoment_{2 * q}"] = n * diff * diff / log_n if n > 1 else math.nan
        if noise_moments and q in noise_moments:
            out[f"sigma_{2 * q}"] = noise_moments[q]
            out[f"moment_ratio_{2 * q}"] = (ledger.C[q] / n / noise_moments[q]
                                            if q in ledger.C and noise_moments[q] > 0 else math.nan)
    if 1 in ledger.q_set:
        d1 = ledger.Gamma(1) - ledger.Delta(1)
        out["estmom"] = n * d1 / log_det_norm if log_det_norm > 0 else math.nan
    for p in ledger.p_set:
        out[f"C_{p}"] = ledger.C[p]
        ell = target_ell(p, d, sigma2) if sigma2 > 0 else math.nan
        out[f"target_ell_{p}"] = ell
        if theta_known:
            out[f"G_{p}"] = ledger.G[p]
            out[f"GL_{p}"] = ledger.GL[p]
            out[f"res5_{p}"] = ledger.GL[p] / log_n if n > 1 else math.nan
            out[f"cvmoy_{p}"] = ledger.cvmoy[p] / log_det_norm if log_det_norm > 0 else math.nan
        else:
            for key in ("G", "GL", "res5", "cvmoy"):
                out[f"{key}_{p}"] = math.nan
    if out["status"] != "ok":
        # a degenerate design carries no information; flag every statistic
        for key in out:
            if key not in ("n", "status"):
                out[key] = math.nan
    return out


@dataclass
class CLSState:
    """Conditional LS for a branching process with immigration.

    The mean branch is LS on ``(Psi_k, Z_{k+1})``; the variance branch is LS
    on ``(Phi_k / c_k, eps_hat_{k+1}^2 / c_k)``.  Both start from ``I_2``.
    """

    mean: LSState
    var: LSState

    @classmethod
    def start(cls, theta=None, eta=None, refresh_interval: int = DEFAULT_REFRESH_INTERVAL) -> "CLSState":
        return cls(
            mean=LSState.start(np.eye(2), true_theta=theta, refresh_interval=refresh_interval),
            var=LSState.start(np.eye(2), true_theta=eta, refresh_interval=refresh_interval),
        )

    @property
    def theta_hat(self) -> np.ndarray:
        return self.mean.theta_hat

    @property
    def eta_hat(self) -> np.ndarray:
        return self.var.theta_hat

    @property
    def S(self) -> np.ndarray:
        return self.mean.gram.S

    @property
    def Q(self) -> np.ndarray:
        return self.var.gram.S

    def update(self, x_n: int, x_next: int) -> float:
        """Consume one raw step; return ``eps_hat_{k+1} = X_{k+1} - theta_hat_k^T Phi_k``."""
        eps_hat = self.mean_update(x_n, x_next)
        self.variance_update(x_n, eps_hat)
        return eps_hat

    def mean_update(self, x_n: int, x_next: int) -> float:
        psi, z, _, c = normalize_branching(x_n, x_next, 0.0, 0.0)
        r, _ = self.mean.update(psi, float(z))
        return r * math.sqrt(float(c))

    def variance_update(self, x_n: int, eps_hat: float) -> None:
        c = x_n + 1.0
        phi = np.array([x_n, 1.0]) / c
        self.var.update(phi, eps_hat * eps_hat / c)


def cls_mean_update(state: CLSState, x_n: int, x_next: int) -> float:
    return state.mean_update(x_n, x_next)


def cls_variance_update(state: CLSState, x_n: int, eps_hat: float) -> CLSState:
    state.variance_update(x_n, eps_hat)
    return state


def eta_error_statistic(err, Lambda, p: int, n: int | None = None) -> float:
    """``(1/log n) sum_{k<=n} k^{p-1} ((eta_hat_k - eta)^T Lambda (eta_hat_k - eta))^p``."""
    err = np.asarray(err, dtype=float)
    if n is not None:
        err = err[:n]
    n = err.shape[0]
    Lambda = as_sym_matrix(Lambda, "Lambda")
    k = np.arange(1, n + 1, dtype=float)
    q = np.einsum("ij,jk,ik->i", err, Lambda, err)
    return float(np.sum(k ** (p - 1) * q**p) / math.log(n))


def eta_error_report(err, Lambda, p: int, checkpoints, sigma2_candidate: float = 1.0) -> list[dict]:
    """Per-checkpoint eta error statistic with a candidate ``ell(p)`` logged beside it."""
    return [
        {"n": int(n), "p": p, "eta_stat": eta_error_statistic(err, Lambda, p, n),
         "candidate_ell": target_ell(p, 2, sigma2_candidate)}
        for n in checkpoints
    ]
