"""Symmetric positive definite state with rank-one inverse and log-determinant updates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_REFRESH_INTERVAL = 4096
SYMMETRY_TOL = 1e-12


class NotPositiveDefiniteError(ValueError):
    """Raised when a matrix that must be SPD fails factorization."""


class StateCorruptionError(RuntimeError):
    """Raised when a maintained Gram matrix has lost positive definiteness."""


def as_sym_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a float64 square array, rejecting asymmetric input."""
    m = np.array(a, dtype=float, ndmin=2)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    gap = np.abs(m - m.T)
    if np.any(gap > SYMMETRY_TOL * (1.0 + np.abs(m))):
        i, j = np.unravel_index(np.argmax(gap), gap.shape)
        raise ValueError(f"{name} is not symmetric: entries ({i},{j}) and ({j},{i}) differ by {gap[i, j]:.3e}")
    return m


def check_positive_definite(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Cholesky-factor ``m``; on failure name the first non-positive leading minor."""
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        for k in range(1, m.shape[0] + 1):
            minor = np.linalg.det(m[:k, :k])
            if not minor > 0:
                raise NotPositiveDefiniteError(
                    f"{name} is not positive definite: leading minor of order {k} is {minor:.6g}"
                ) from None
        raise NotPositiveDefiniteError(f"{name} is numerically not positive definite") from None


def spd_inverse_logdet(m: np.ndarray, name: str = "matrix") -> tuple[np.ndarray, float]:
    chol = check_positive_definite(m, name)
    eye = np.eye(m.shape[0])
    chol_inv = np.linalg.solve(chol, eye)
    inv = chol_inv.T @ chol_inv
    inv = 0.5 * (inv + inv.T)
    return inv, 2.0 * float(np.sum(np.log(np.diag(chol))))


@dataclass
class GramState:
    """Running ``S_n = S0 + sum phi phi^T`` with its inverse and log-determinant.

    ``n`` counts consumed rank-one updates minus one, so a freshly built state
    (prior only) has ``n == -1``.
    """

    S: np.ndarray
    S_inv: np.ndarray
    log_det: float
    n: int = -1
    updates_since_refresh: int = 0
    refresh_interval: int = DEFAULT_REFRESH_INTERVAL
    log_det0: float = field(default=0.0)

    @classmethod
    def from_matrix(cls, S0, refresh_interval: int = DEFAULT_REFRESH_INTERVAL) -> "GramState":
        S0 = as_sym_matrix(S0, "S0")
        inv, log_det = spd_inverse_logdet(S0, "S0")
        if refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        return cls(S=S0.copy(), S_inv=inv, log_det=log_det, refresh_interval=refresh_interval, log_det0=log_det)

    @property
    def dim(self) -> int:
        return self.S.shape[0]

    def copy(self) -> "GramState":
        return GramState(
            S=self.S.copy(),
            S_inv=self.S_inv.copy(),
            log_det=self.log_det,
            n=self.n,
            updates_since_refresh=self.updates_since_refresh,
            refresh_interval=self.refresh_interval,
            log_det0=self.log_det0,
        )

    def _vector(self, x, name: str) -> np.ndarray:
        v = np.asarray(x, dtype=float).reshape(-1)
        if v.shape[0] != self.dim:
            raise ValueError(f"{name} has length {v.shape[0]}, expected {self.dim}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{name} has non-finite entries")
        return v

    def rank_one_update(self, phi) -> float:
        """Add ``phi phi^T`` and return the explosion coefficient ``f = c / (1 + c)``.

        ``c = phi^T S_inv phi`` uses the pre-update inverse, so ``f`` equals
        ``phi^T S_new^{-1} phi`` and ``log_det`` grows by ``log(1 + c)``.  A
        refresh may correct accumulated drift downward, but never below the
        value held before this update, so ``log_det`` stays nondecreasing.
        """
        phi = self._vector(phi, "phi")
        ld_before = self.log_det
        u = self.S_inv @ phi
        c = float(phi @ u)
        if c < 0.0:
            self.refresh_factorization()
            u = self.S_inv @ phi
            c = float(phi @ u)
            if c < 0.0:
                raise StateCorruptionError(f"negative quadratic form {c:.3e} after refresh")
        self.S += np.outer(phi, phi)
        self.S_inv -= np.outer(u, u) / (1.0 + c)
        self.log_det += math.log1p(c)
        self.n += 1
        self.updates_since_refresh += 1
        if self.updates_since_refresh >= self.refresh_interval:
            self.refresh_factorization()
        self.log_det = max(self.log_det, ld_before)
        return c / (1.0 + c)

    def refresh_factorization(self) -> None:
        try:
            self.S_inv, self.log_det = spd_inverse_logdet(self.S, "S")
        except NotPositiveDefiniteError as exc:
            raise StateCorruptionError(str(exc)) from exc
        self.updates_since_refresh = 0

    def quadratic_form(self, x) -> float:
        x = self._vector(x, "x")
        y = self.S_inv @ x
        return 0.5 * (float(x @ y) + float(y @ x))

    def bilinear(self, x, y) -> float:
        """``x^T S_inv y``."""
        return float(self._vector(x, "x") @ (self.S_inv @ self._vector(y, "y")))

    def to_dict(self) -> dict:
        return {
            "S": self.S.tolist(),
            "S_inv": self.S_inv.tolist(),
            "log_det": self.log_det,
            "n": self.n,
            "updates_since_refresh": self.updates_since_refresh,
            "refresh_interval": self.refresh_interval,
            "log_det0": self.log_det0,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GramState":
        return cls(
            S=np.asarray(data["S"], dtype=float),
            S_inv=np.asarray(data["S_inv"], dtype=float),
            log_det=float(data["log_det"]),
            n=int(data["n"]),
            updates_since_refresh=int(data["updates_since_refresh"]),
            refresh_interval=int(data["refresh_interval"]),
            log_det0=float(data["log_det0"]),
        )


def init_gram(S0, refresh_interval: int = DEFAULT_REFRESH_INTERVAL) -> GramState:
    return GramState.from_matrix(S0, refresh_interval)
