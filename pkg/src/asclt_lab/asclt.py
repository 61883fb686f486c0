"""Log-averaged moment statistics, their closed-form limits, and a weighted KS diagnostic."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .martingale import StepRecord


def _ell_integer(p: int, d: int) -> int:
    out = d
    for j in range(1, p):
        out *= d + 2 * j
    return out


def target_ell(p: int, d: int, sigma2: float = 1.0) -> float:
    """Limit of ``(1/log d_n) sum f_k V_k^p``: ``d sigma^{2p} prod_{j<p} (d + 2j)``."""
    _check_pd(p, d, sigma2)
    return _ell_integer(p, d) * sigma2**p


def target_lambda(p: int, d: int, sigma2: float = 1.0) -> float:
    """Limit of ``(1/log d_n) sum (V_k^p - h_k^p)``, i.e. ``(p/d) ell(p)``."""
    _check_pd(p, d, sigma2)
    return p * _ell_integer(p, d) / d * sigma2**p


def gaussian_even_moment(p: int, sigma2: float = 1.0) -> float:
    """``E[Z^{2p}]`` for ``Z ~ N(0, sigma2)``."""
    _check_pd(p, 1, sigma2)
    return math.factorial(2 * p) // (2**p * math.factorial(p)) * sigma2**p


def _check_pd(p: int, d: int, sigma2: float) -> None:
    if int(p) != p or p < 1:
        raise ValueError(f"p must be a positive integer, got {p}")
    if int(d) != d or d < 1:
        raise ValueError(f"d must be a positive integer, got {d}")
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")


@dataclass
class MomentAccumulator:
    """Running sums behind the log-averaged moment statistics of order ``p``.

    ``log_det`` and ``log_det0`` are the current and prior log-determinants;
    statistics are normalized by their difference.  Merged accumulators hold
    sums of both, which turns the merged report into the ``log d``-weighted
    mean of the parts.
    """

    p: int
    d: int
    sigma2: float = 1.0
    sum_fV: float = 0.0
    sum_ap: float = 0.0
    sum_a1p: float = 0.0
    sum_scalar: float = 0.0
    log_det: float = 0.0
    log_det0: float = 0.0
    k_count: int = 0
    parts: int = 1

    @classmethod
    def empty(cls, p: int, d: int, sigma2: float = 1.0, log_det0: float = 0.0) -> "MomentAccumulator":
        """Fresh accumulator; with the default ``log_det0`` it is the identity of ``merge``."""
        _check_pd(p, d, sigma2)
        return cls(p=p, d=d, sigma2=sigma2, log_det=log_det0, log_det0=log_det0, parts=0)

    @property
    def normalizer(self) -> float:
        return self.log_det - self.log_det0

    def accumulate(self, record: StepRecord) -> "MomentAccumulator":
        p = self.p
        self.sum_fV += record.f * record.V**p
        self.sum_ap += record.V**p - record.h**p
        self.sum_a1p += record.a1**p
        self.log_det = record.log_det
        self.k_count += 1
        self.parts = max(self.parts, 1)
        return self

    def accumulate_scalar(self, f: float, M: float, s_prev: float) -> "MomentAccumulator":
        """Scalar statistic ``f_k (M_k^2 / s_{k-1})^p``, fed independently of the records."""
        self.sum_scalar += f * (M * M / s_prev) ** self.p
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if (self.p, self.d, self.sigma2) != (other.p, other.d, other.sigma2):
            raise ValueError(
                f"cannot merge (p={self.p}, d={self.d}, sigma2={self.sigma2}) "
                f"with (p={other.p}, d={other.d}, sigma2={other.sigma2})"
            )
        return MomentAccumulator(
            p=self.p,
            d=self.d,
            sigma2=self.sigma2,
            sum_fV=self.sum_fV + other.sum_fV,
            sum_ap=self.sum_ap + other.sum_ap,
            sum_a1p=self.sum_a1p + other.sum_a1p,
            sum_scalar=self.sum_scalar + other.sum_scalar,
            log_det=self.log_det + other.log_det,
            log_det0=self.log_det0 + other.log_det0,
            k_count=self.k_count + other.k_count,
            parts=self.parts + other.parts,
        )

    def report(self) -> dict:
        ell = target_ell(self.p, self.d, self.sigma2)
        lam = target_lambda(self.p, self.d, self.sigma2)
        out = {
            "p": self.p,
            "d": self.d,
            "target_ell": ell,
            "target_lambda": lam,
            "target_gaussian": gaussian_even_moment(self.p, self.sigma2),
            # corollary limit of sum a_k(1)^p: sigma2 for p == 1, zero otherwise
            "target_a1p": self.sigma2 if self.p == 1 else 0.0,
        }
        norm = self.normalizer
        if not norm > 0:
            out.update(status="insufficient data", avg_fV=math.nan, avg_ap=math.nan, avg_a1p=math.nan,
                       avg_scalar=math.nan, rel_err_ell=math.nan, rel_err_lambda=math.nan)
            return out
        avg_fV = self.sum_fV / norm
        avg_ap = self.sum_ap / norm
        out.update(
            status="ok",
            avg_fV=avg_fV,
            avg_ap=avg_ap,
            avg_a1p=self.sum_a1p / norm,
            avg_scalar=self.sum_scalar / norm if self.d == 1 else math.nan,
            rel_err_ell=abs(avg_fV - ell) / ell,
            rel_err_lambda=abs(avg_ap - lam) / lam,
        )
        return out


def accumulate(acc: MomentAccumulator, record: StepRecord) -> MomentAccumulator:
    return acc.accumulate(record)


def merge(a: MomentAccumulator, b: MomentAccumulator) -> MomentAccumulator:
    return a.merge(b)


def report(acc: MomentAccumulator) -> dict:
    return acc.report()


def scalar_terms(phi, eps, s0: float = 1.0, M0: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scalar-path ``f_k``, ``M_k^2 / s_{k-1}`` and ``log s_k`` straight from the stream.

    Uses running sums only, no inverse updates, so it checks the vector path.
    """
    phi = np.asarray(phi, dtype=float).reshape(-1)
    eps = np.asarray(eps, dtype=float).reshape(-1)
    s = s0 + np.cumsum(phi * phi)
    s_prev = np.concatenate(([s0], s[:-1]))
    M = M0 + np.concatenate(([0.0], np.cumsum(phi * eps)[:-1]))
    return phi * phi / s, M * M / s_prev, np.log(s)


def accumulators_at(
    p: int,
    d: int,
    sigma2: float,
    f: np.ndarray,
    V: np.ndarray,
    h: np.ndarray,
    log_dets: np.ndarray,
    checkpoints,
    log_det0: float = 0.0,
    scalar: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[MomentAccumulator]:
    """Snapshots of a ``MomentAccumulator`` after each checkpoint count of steps.

    Equivalent to feeding the records one by one; ``scalar`` optionally
    carries ``(f, M^2/s_prev)`` from :func:`scalar_terms`.
    """
    c_fV = np.cumsum(f * V**p)
    c_ap = np.cumsum(V**p - h**p)
    c_a1 = np.cumsum((V - h) ** p)
    c_sc = np.cumsum(scalar[0] * scalar[1] ** p) if scalar is not None else None
    out = []
    for n in checkpoints:
        i = n - 1
        out.append(
            MomentAccumulator(
                p=p,
                d=d,
                sigma2=sigma2,
                sum_fV=float(c_fV[i]),
                sum_ap=float(c_ap[i]),
                sum_a1p=float(c_a1[i]),
                sum_scalar=float(c_sc[i]) if c_sc is not None else 0.0,
                log_det=float(log_dets[i]),
                log_det0=log_det0,
                k_count=int(n),
            )
        )
    return out


def default_edges(sigma2: float = 1.0, n_edges: int = 201, width: float = 6.0) -> np.ndarray:
    s = math.sqrt(sigma2)
    return np.linspace(-width * s, width * s, n_edges)


@dataclass
class WeightedHistogram:
    """Weighted counts on fixed edges plus an underflow and an overflow bin.

    ``weights[0]`` collects ``x < edges[0]``, ``weights[i]`` collects
    ``edges[i-1] <= x < edges[i]`` and ``weights[-1]`` collects ``x >= edges[-1]``.
    """

    edges: np.ndarray
    weights: np.ndarray = field(default=None)
    total_weight: float = 0.0

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("edges must be strictly increasing")
        if self.weights is None:
            self.weights = np.zeros(len(self.edges) + 1)

    @classmethod
    def gaussian_default(cls, sigma2: float = 1.0) -> "WeightedHistogram":
        return cls(default_edges(sigma2))

    def add(self, x, w) -> "WeightedHistogram":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        w = np.broadcast_to(np.asarray(w, dtype=float), x.shape)
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        idx = np.searchsorted(self.edges, x, side="right")
        self.weights += np.bincount(idx, weights=w, minlength=len(self.weights))
        self.total_weight += float(np.sum(w))
        return self

    def merge(self, other: "WeightedHistogram") -> "WeightedHistogram":
        if not np.array_equal(self.edges, other.edges):
            raise ValueError("histograms have different edges")
        return WeightedHistogram(self.edges.copy(), self.weights + other.weights, self.total_weight + other.total_weight)

    def cdf_at_edges(self) -> np.ndarray:
        """Weighted ``P(X < edge)`` for every edge."""
        return np.cumsum(self.weights)[:-1] / self.total_weight


def weighted_ks(hist: WeightedHistogram, sigma2: float = 1.0) -> float:
    """Largest gap over the bin edges between the weighted CDF and the ``N(0, sigma2)`` CDF."""
    if not hist.total_weight > 0:
        raise ValueError("empty histogram")
    gauss = ndtr(hist.edges / math.sqrt(sigma2))
    return float(np.max(np.abs(hist.cdf_at_edges() - gauss)))
