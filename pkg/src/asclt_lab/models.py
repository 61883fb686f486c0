"""Data-generating processes: noise families, stable autoregressions, branching with immigration."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np
from scipy.signal import lfilter

NOISE_FAMILIES = ("gaussian", "rademacher", "uniform", "shifted-exponential", "zero")


class UnstableModelError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    """Centered i.i.d. noise with variance ``sigma2``.

    ``zero`` is a degenerate test family and requires ``sigma2 == 0``.
    """

    family: str = "gaussian"
    sigma2: float = 1.0
    moment_order_a: float = 8.0

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; expected one of {NOISE_FAMILIES}")
        if self.family == "zero":
            if self.sigma2 != 0:
                raise ValueError("zero noise requires sigma2 == 0")
        elif not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.moment_order_a > 2:
            raise ValueError("moment_order_a must exceed 2")

    def even_moment(self, q: int) -> float:
        """``E[eps^{2q}]``, the constant conditional moment ``sigma(2q)``."""
        s2 = self.sigma2
        if self.family == "gaussian":
            return math.factorial(2 * q) // (2**q * math.factorial(q)) * s2**q
        if self.family == "rademacher":
            return s2**q
        if self.family == "uniform":
            # uniform on [-a, a] with a^2 = 3 sigma2
            return (3.0 * s2) ** q / (2 * q + 1)
        if self.family == "shifted-exponential":
            # E[(E - 1)^k] for E ~ Exp(1) is the subfactorial !k
            return _subfactorial(2 * q) * s2**q
        return 0.0

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSpec":
        return cls(**data)


def _subfactorial(k: int) -> int:
    a, b = 1, 0
    if k == 0:
        return 1
    for i in range(2, k + 1):
        a, b = b, (i - 1) * (a + b)
    return b


def draw_noise(spec: NoiseSpec, rng: np.random.Generator, size=None):
    s = math.sqrt(spec.sigma2)
    if spec.family == "gaussian":
        return rng.normal(0.0, s, size)
    if spec.family == "rademacher":
        return s * (2.0 * rng.integers(0, 2, size) - 1.0)
    if spec.family == "uniform":
        a = s * math.sqrt(3.0)
        return rng.uniform(-a, a, size)
    if spec.family == "shifted-exponential":
        return s * (rng.exponential(1.0, size) - 1.0)
    return np.zeros(size) if size is not None else 0.0


@dataclass(frozen=True)
class ARSpec:
    theta: tuple
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        theta = tuple(float(t) for t in np.atleast_1d(self.theta))
        if not theta:
            raise ValueError("AR order must be at least 1")
        object.__setattr__(self, "theta", theta)
        rho = analyze_ar(self)["rho"]
        if not rho < 1.0:
            raise UnstableModelError(f"AR model is not stable: spectral radius {rho:.6g} >= 1")

    @property
    def d(self) -> int:
        return len(self.theta)

    @classmethod
    def from_dict(cls, data: dict) -> "ARSpec":
        return cls(theta=tuple(data["theta"]), noise=NoiseSpec.from_dict(data.get("noise", {})))


def companion_matrix(theta) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    d = theta.shape[0]
    C = np.zeros((d, d))
    C[0] = theta
    C[1:, :-1] = np.eye(d - 1)
    return C


def analyze_ar(spec) -> dict:
    """Companion matrix and its spectral radius (from the eigenvalues)."""
    theta = spec.theta if hasattr(spec, "theta") else spec
    C = companion_matrix(theta)
    rho = float(np.max(np.abs(np.linalg.eigvals(C))))
    return {"C": C, "rho": rho}


def limiting_matrix_ar(spec: ARSpec, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Solve ``L = C L C^T + Gamma`` by fixed-point iteration from ``L = Gamma``."""
    C = companion_matrix(spec.theta)
    gamma = np.zeros_like(C)
    gamma[0, 0] = spec.noise.sigma2
    L = gamma.copy()
    for _ in range(max_iter):
        nxt = C @ L @ C.T + gamma
        change = np.max(np.abs(nxt - L))
        L = nxt
        if change <= tol:
            return 0.5 * (L + L.T)
    raise RuntimeError(f"fixed-point iteration did not converge in {max_iter} steps (near unit root?)")


@dataclass
class Trajectory:
    """Regression stream ``(phi_n, x_{n+1}, eps_{n+1}, alpha_n)`` for ``n = 0..N-1``."""

    phi: np.ndarray
    x_next: np.ndarray
    eps: np.ndarray
    alpha: np.ndarray

    def __len__(self) -> int:
        return self.x_next.shape[0]

    def __iter__(self):
        for k in range(len(self)):
            yield self.phi[k], float(self.x_next[k]), float(self.eps[k]), float(self.alpha[k])

    def to_csv(self, out: TextIO | None = None) -> str | None:
        buf = io.StringIO() if out is None else out
        writer = csv.writer(buf, lineterminator="\n")
        d = self.phi.shape[1]
        writer.writerow(["n", *[f"phi_{i}" for i in range(d)], "x_next", "eps"])
        for k in range(len(self)):
            writer.writerow([k, *self.phi[k].tolist(), float(self.x_next[k]), float(self.eps[k])])
        return buf.getvalue() if out is None else None


def simulate_ar(spec: ARSpec, n_steps: int, rng) -> Trajectory:
    """Simulate from a zero initial state; ``phi_n = (X_n, ..., X_{n-d+1})``."""
    rng = np.random.default_rng(rng)
    d = spec.d
    eps = np.asarray(draw_noise(spec.noise, rng, n_steps), dtype=float)
    x = lfilter([1.0], np.concatenate(([1.0], -np.asarray(spec.theta))), eps)
    # padded[d - 1 + t] = X_t, with X_t = 0 for t <= 0
    padded = np.concatenate((np.zeros(d), x))
    idx = (d - 1) + np.arange(n_steps)[:, None] - np.arange(d)[None, :]
    return Trajectory(phi=padded[idx], x_next=x, eps=eps, alpha=np.arange(n_steps, dtype=float))


BRANCHING_FAMILIES = ("poisson", "geometric", "constant")


@dataclass(frozen=True)
class CountLaw:
    """Nonnegative integer law given by family and mean.

    ``geometric`` counts failures before the first success; ``constant`` is a
    degenerate test family with an integer mean.
    """

    family: str = "poisson"
    mean: float = 1.0

    def __post_init__(self):
        if self.family not in BRANCHING_FAMILIES:
            raise ValueError(f"unknown count family {self.family!r}; expected one of {BRANCHING_FAMILIES}")
        if self.mean < 0:
            raise ValueError("mean must be nonnegative")
        if self.family == "constant" and self.mean != int(self.mean):
            raise ValueError("constant law needs an integer mean")
        if self.family != "constant" and not self.mean > 0:
            raise ValueError(f"{self.family} law needs a positive mean")

    @property
    def variance(self) -> float:
        mu = self.mean
        if self.family == "poisson":
            return mu
        if self.family == "geometric":
            return mu * (1.0 + mu)
        return 0.0

    @property
    def fourth_central(self) -> float:
        mu = self.mean
        if self.family == "poisson":
            return mu + 3.0 * mu * mu
        if self.family == "geometric":
            p = 1.0 / (1.0 + mu)
            q = 1.0 - p
            return q * (9.0 * q + p * p) / p**4
        return 0.0

    def sample(self, rng: np.random.Generator, size=None):
        if self.family == "poisson":
            return rng.poisson(self.mean, size)
        if self.family == "geometric":
            return rng.geometric(1.0 / (1.0 + self.mean), size) - 1
        return np.full(size, int(self.mean)) if size is not None else int(self.mean)


@dataclass(frozen=True)
class BranchingSpec:
    offspring: CountLaw = field(default_factory=lambda: CountLaw("poisson", 0.5))
    immigration: CountLaw = field(default_factory=lambda: CountLaw("poisson", 1.0))
    offspring_cap: int = 10_000_000

    def __post_init__(self):
        if not self.offspring.mean < 1:
            raise UnstableModelError(f"offspring mean {self.offspring.mean} is not subcritical")
        if self.offspring.family == "constant" and self.offspring.mean != 0:
            raise ValueError("constant offspring law must have mean 0 to be subcritical")
        if not self.immigration.mean > 0:
            raise ValueError("immigration mean must be positive")

    m = property(lambda self: self.offspring.mean)
    lam = property(lambda self: self.immigration.mean)
    sigma2 = property(lambda self: self.offspring.variance)
    b2 = property(lambda self: self.immigration.variance)
    tau4 = property(lambda self: self.offspring.fourth_central)
    nu4 = property(lambda self: self.immigration.fourth_central)

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.m, self.lam])

    @property
    def eta(self) -> np.ndarray:
        return np.array([self.sigma2, self.b2])

    @classmethod
    def from_dict(cls, data: dict) -> "BranchingSpec":
        kw = {}
        if "offspring" in data:
            kw["offspring"] = CountLaw(**data["offspring"])
        if "immigration" in data:
            kw["immigration"] = CountLaw(**data["immigration"])
        if "offspring_cap" in data:
            kw["offspring_cap"] = int(data["offspring_cap"])
        return cls(**kw)


@dataclass
class BranchingPath:
    """Raw chain ``X_0 = 1, X_1, ..., X_N`` with the immigration draws ``I_1..I_N``."""

    x: np.ndarray
    immigration: np.ndarray

    def __len__(self) -> int:
        return self.immigration.shape[0]

    def steps(self):
        for k in range(len(self)):
            yield int(self.x[k]), int(self.x[k + 1]), int(self.immigration[k])


def simulate_branching(spec: BranchingSpec, n_steps: int, rng, x0: int = 1) -> BranchingPath:
    rng = np.random.default_rng(rng)
    imm = np.asarray(spec.immigration.sample(rng, n_steps), dtype=np.int64)
    x = np.empty(n_steps + 1, dtype=np.int64)
    x[0] = x0
    X = x0
    off = spec.offspring
    if off.family == "poisson":
        pois = rng.poisson
        m = off.mean
        for k in range(n_steps):
            # sum of X Poisson(m) draws is Poisson(m X)
            X = (pois(m * X) if X > 0 else 0) + int(imm[k])
            x[k + 1] = X
    else:
        for k in range(n_steps):
            if X > spec.offspring_cap:
                raise RuntimeError(f"population {X} exceeds offspring cap {spec.offspring_cap}")
            X = (int(off.sample(rng, X).sum()) if X > 0 else 0) + int(imm[k])
            x[k + 1] = X
    return BranchingPath(x=x, immigration=imm)


def normalize_branching(x_n, x_next, m: float, lam: float):
    """Return ``(Psi_n, Z_{n+1}, xi_{n+1}, c_n)`` with ``c_n = X_n + 1``.

    Works on scalars or aligned arrays.
    """
    x_n = np.asarray(x_n, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    c = x_n + 1.0
    r = 1.0 / np.sqrt(c)
    psi = np.stack((x_n * r, r), axis=-1)
    z = x_next * r
    xi = (x_next - m * x_n - lam) * r
    return psi, z, xi, c


def branching_trajectory(path: BranchingPath, spec: BranchingSpec) -> Trajectory:
    psi, z, xi, _ = normalize_branching(path.x[:-1], path.x[1:], spec.m, spec.lam)
    return Trajectory(phi=psi, x_next=z, eps=xi, alpha=np.arange(len(path), dtype=float))


def conditional_variance_V(spec: BranchingSpec, x) -> float:
    """``E[V_{n+1}^2 | X_n = x]`` for ``V_{n+1} = eps_{n+1}^2 - sigma2 X_n - b2``."""
    s2, b2 = spec.sigma2, spec.b2
    return 2.0 * s2 * s2 * x * x + x * (spec.tau4 - 3.0 * s2 * s2 + 4.0 * b2 * s2) + spec.nu4 - b2 * b2


def _batch_means_se(values: np.ndarray, n_batches: int = 50) -> float:
    usable = (values.shape[0] // n_batches) * n_batches
    means = values[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches))


def stationary_matrix_estimates(spec: BranchingSpec, burn_in: int, samples: int, rng, n_batches: int = 50) -> dict:
    """Plug-in estimates of the two limiting matrices from one long chain.

    Standard errors use batch means over ``n_batches`` consecutive blocks to
    account for chain autocorrelation.
    """
    path = simulate_branching(spec, burn_in + samples, rng)
    x = path.x[burn_in + 1:].astype(float)
    c = x + 1.0
    fields = {
        "x2_c": x * x / c,
        "x_c": x / c,
        "inv_c": 1.0 / c,
        "x2_c2": x * x / (c * c),
        "x_c2": x / (c * c),
        "inv_c2": 1.0 / (c * c),
    }
    mean = {k: float(v.mean()) for k, v in fields.items()}
    se = {k: _batch_means_se(v, n_batches) for k, v in fields.items()}

    def mat(a, b, c_):
        return np.array([[a, b], [b, c_]])

    return {
        "L_hat": mat(mean["x2_c"], mean["x_c"], mean["inv_c"]),
        "L_se": mat(se["x2_c"], se["x_c"], se["inv_c"]),
        "Lambda_hat": mat(mean["x2_c2"], mean["x_c2"], mean["inv_c2"]),
        "Lambda_se": mat(se["x2_c2"], se["x_c2"], se["inv_c2"]),
        "mean_x": float(x.mean()),
    }
