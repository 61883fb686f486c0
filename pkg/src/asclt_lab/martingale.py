"""Vector martingale transforms ``M_n = M_0 + sum Phi_{k-1} eps_k`` and their per-step quantities."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, TextIO

import numpy as np

from .linalg import GramState, as_sym_matrix, spd_inverse_logdet

TRACE_FIELDS = ("n", "f", "V", "g", "h", "a1", "log_det", "eps")


@dataclass(frozen=True)
class StepRecord:
    """Quantities of step ``n``.

    ``V`` and ``g`` are evaluated with ``S_{n-1}^{-1}``; ``f`` and ``h`` with
    ``S_n^{-1}``.  ``eps`` is the noise ``eps_{n+1}`` that moved ``M_n`` to
    ``M_{n+1}``.  ``pi`` is attached by the LS estimator when the true
    parameter is known.
    """

    n: int
    f: float
    V: float
    g: float
    h: float
    a1: float
    log_det: float
    eps: float
    pi: float | None = None


@dataclass(frozen=True)
class LimitDiagnostics:
    beta: float
    gamma: float
    m: float
    delta: float
    varphi: float
    v: float


@dataclass
class TransformState:
    M: np.ndarray
    gram: GramState
    n: int = 0

    @classmethod
    def start(cls, M0, gram: GramState) -> "TransformState":
        if gram.n != -1:
            raise ValueError(f"gram must be freshly initialized (n == -1), got n == {gram.n}")
        M0 = np.array(M0, dtype=float).reshape(-1)
        if M0.shape[0] != gram.dim:
            raise ValueError(f"M0 has length {M0.shape[0]}, expected {gram.dim}")
        if not np.all(np.isfinite(M0)):
            raise ValueError("M0 has non-finite entries")
        return cls(M=M0, gram=gram, n=0)

    def advance(self, phi, eps: float) -> StepRecord:
        phi = np.asarray(phi, dtype=float).reshape(-1)
        eps = float(eps)
        if not math.isfinite(eps):
            raise ValueError("eps must be finite")
        # V_n, g_n on S_{n-1}^{-1}; f_n, h_n on S_n^{-1}
        V = self.gram.quadratic_form(self.M)
        g = self.gram.bilinear(self.M, phi)
        f = self.gram.rank_one_update(phi)
        h = self.gram.quadratic_form(self.M)
        rec = StepRecord(n=self.n, f=f, V=V, g=g, h=h, a1=V - h, log_det=self.gram.log_det, eps=eps)
        self.M = self.M + phi * eps
        self.n += 1
        return rec

    def to_dict(self) -> dict:
        return {"M": self.M.tolist(), "n": self.n, "gram": self.gram.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "TransformState":
        return cls(M=np.asarray(data["M"], dtype=float), gram=GramState.from_dict(data["gram"]), n=int(data["n"]))


def init_transform(M0, gram: GramState) -> TransformState:
    return TransformState.start(M0, gram)


def limit_diagnostics(
    state: TransformState,
    L,
    phi,
    alpha_n: float,
    alpha_prev: float | None = None,
) -> LimitDiagnostics:
    """Normalized quantities of step ``n``, to be called before ``state.advance(phi, ...)``.

    The gram state still holds ``S_{n-1}``, so ``beta_{n-1}`` is read directly
    and ``beta_n = beta_{n-1} + phi^T L^{-1} phi``.  ``v`` is NaN when
    ``alpha_prev`` is missing or non-positive.
    """
    L = as_sym_matrix(L, "L")
    L_inv, _ = spd_inverse_logdet(L, "L")
    phi = np.asarray(phi, dtype=float).reshape(-1)
    M = state.M
    beta_prev = float(np.trace(L_inv @ state.gram.S))
    phi_L = float(phi @ L_inv @ phi)
    beta = beta_prev + phi_L
    ML = float(M @ L_inv @ M)
    v = ML / alpha_prev if alpha_prev is not None and alpha_prev > 0 else math.nan
    return LimitDiagnostics(
        beta=beta,
        gamma=phi_L / beta,
        m=ML / beta_prev,
        delta=float(M @ L_inv @ phi) / beta,
        varphi=phi_L / alpha_n,
        v=v,
    )


ROUNDING_FLOOR = 16 * np.finfo(float).eps


def _relative(a: float, b: float, scale: float, floor: float = 0.0) -> float:
    """``|a - b|`` in excess of ``floor``, relative to the larger side or ``scale``."""
    denom = max(abs(a), abs(b), scale)
    excess = max(abs(a - b) - floor, 0.0)
    return 0.0 if excess == 0.0 else excess / denom


def check_step_identities(record: StepRecord) -> list[tuple[str, float]]:
    """Relative residuals of the Riccati identities for one step.

    Residuals are scaled by the largest of the two sides and ``f V``, which
    bounds ``a1`` from above.  ``a1 = V - h`` cancels when ``f`` is tiny, so
    the rounding error of that subtraction, ``ROUNDING_FLOOR * (|V| + |h|)``,
    is discounted first.
    """
    scale = record.f * record.V
    floor = ROUNDING_FLOOR * (abs(record.V) + abs(record.h))
    rhs = (1.0 - record.f) * record.g**2
    out = [("a1 = (1-f) g^2", _relative(record.a1, rhs, scale, floor))]
    if record.pi is not None:
        out.append(("a1 = (1-f) pi^2", _relative(record.a1, (1.0 - record.f) * record.pi**2, scale, floor)))
    return out


def write_trace(records: Iterable[StepRecord], out: TextIO | None = None) -> str | None:
    """Write records as CSV rows ``n,f,V,g,h,a1,log_det,eps``.

    Returns the CSV text when ``out`` is None.
    """
    buf = io.StringIO() if out is None else out
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_FIELDS)
    for rec in records:
        row = asdict(rec)
        writer.writerow([row[k] for k in TRACE_FIELDS])
    return buf.getvalue() if out is None else None
