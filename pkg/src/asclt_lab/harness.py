"""Seeded, replicated experiments: configuration, per-replication runs, merging and report emission."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import asclt
from .estimators import corollary_report, eta_error_statistic, ledger_checkpoints
from .kernels import replay
from .linalg import DEFAULT_REFRESH_INTERVAL
from .models import (
    ARSpec,
    BranchingSpec,
    NoiseSpec,
    branching_trajectory,
    draw_noise,
    limiting_matrix_ar,
    simulate_ar,
    simulate_branching,
    stationary_matrix_estimates,
)

log = logging.getLogger(__name__)

DEFAULT_SEED = 2008
SEED_ENV = "ASCLT_LAB_SEED"
SEED_SCHEME = (
    "seed_r = numpy.random.SeedSequence(base_seed, spawn_key=(r,)).generate_state(1, uint64)[0]; "
    "ar: default_rng(seed_r); probe: SeedSequence(seed_r).spawn(2) -> (phi walk, noise); "
    "branching: SeedSequence(seed_r).spawn(3) -> (chain, stationary A, stationary B)"
)

ASCLT_FIELDS = ["replication", "seed", "n", "p", "d", "avg_fV", "target_ell", "rel_err_ell", "avg_ap",
                "target_lambda", "rel_err_lambda", "ks", "avg_scalar", "avg_a1p", "log_det"]
PROBE_FIELDS = ["replication", "seed", "n", "p", "stat_fV", "stat_ap", "max_fV", "max_ap", "log_det"]


class ConfigError(ValueError):
    pass


def default_checkpoints(n_steps: int) -> list[int]:
    """Geometric grid ``1e3, 3e3, 1e4, ...`` up to ``n_steps``, with ``n_steps`` appended."""
    out = []
    base = 1000
    while base <= n_steps:
        out.append(base)
        if 3 * base <= n_steps:
            out.append(3 * base)
        base *= 10
    if not out or out[-1] != n_steps:
        out.append(n_steps)
    return out


def env_seed(default: int = DEFAULT_SEED) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from exc


@dataclass
class ExperimentConfig:
    """Experiment description; ``model`` is the raw model block from the config file.

    Model blocks: ``{"type": "ar", "theta": [...], "noise": {...}}``,
    ``{"type": "branching", "offspring": {...}, "immigration": {...}}`` or
    ``{"type": "probe", "noise": {...}}`` (regressor ``(1, W_n)`` with a
    Rademacher walk ``W``).
    """

    model: dict = field(default_factory=lambda: {"type": "ar", "theta": [0.5]})
    name: str = "experiment"
    p_set: list = field(default_factory=lambda: [1, 2])
    q_set: list = field(default_factory=lambda: [1, 2])
    n_steps: int = 100_000
    replications: int = 1
    seed: int = field(default_factory=env_seed)
    checkpoints: list | None = None
    output_dir: str = "out"
    refresh_interval: int = DEFAULT_REFRESH_INTERVAL
    m0: str = "ls"
    ks_direction: list | None = None
    stationary: dict = field(default_factory=lambda: {"burn_in": 1000, "samples": 1_000_000})
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_steps < 1000:
            raise ConfigError(f"n_steps must be at least 1000, got {self.n_steps}")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        for name in ("p_set", "q_set"):
            vals = getattr(self, name)
            if not vals or any(int(v) != v or v < 1 for v in vals):
                raise ConfigError(f"{name} must be a nonempty list of positive integers")
            setattr(self, name, sorted({int(v) for v in vals}))
        if self.checkpoints is None:
            self.checkpoints = default_checkpoints(self.n_steps)
        cps = [int(c) for c in self.checkpoints]
        if not cps or any(b <= a for a, b in zip(cps, cps[1:])) or cps[0] < 2 or cps[-1] > self.n_steps:
            raise ConfigError("checkpoints must be strictly increasing within [2, n_steps]")
        self.checkpoints = cps
        if self.m0 not in ("ls", "zero"):
            raise ConfigError(f"m0 must be 'ls' or 'zero', got {self.m0!r}")
        if self.refresh_interval < 1:
            raise ConfigError("refresh_interval must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        try:
            self.spec()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid model block: {exc}") from exc
        if self.ks_direction is not None and len(self.ks_direction) != self.dim:
            raise ConfigError("ks_direction length must match the regression dimension")

    @property
    def model_type(self) -> str:
        return self.model.get("type", "ar")

    def spec(self):
        kind = self.model_type
        body = {k: v for k, v in self.model.items() if k != "type"}
        if kind == "ar":
            return ARSpec.from_dict(body)
        if kind == "branching":
            return BranchingSpec.from_dict(body)
        if kind == "probe":
            return NoiseSpec.from_dict(body.get("noise", {}))
        raise ConfigError(f"unknown model type {kind!r}")

    @property
    def dim(self) -> int:
        kind = self.model_type
        return self.spec().d if kind == "ar" else 2

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)


def replication_seed(base_seed: int, replication: int) -> int:
    ss = np.random.SeedSequence(base_seed, spawn_key=(replication,))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class ReplicationReport:
    replication: int
    seed: int
    status: str = "ok"
    error: str | None = None
    wall_time: float = 0.0
    tables: dict = field(default_factory=dict)
    accumulators: dict = field(default_factory=dict)
    histograms: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)


def _m0(config: ExperimentConfig, S0: np.ndarray, theta) -> np.ndarray:
    return -S0 @ np.asarray(theta, dtype=float) if config.m0 == "ls" else np.zeros(S0.shape[0])


def _asclt_tables(config, rep, seed, rp, d, sigma2, phi, eps, M0, hist_source=True):
    cps = config.checkpoints
    scalar = None
    if d == 1:
        f_s, w_s, _ = asclt.scalar_terms(phi[:, 0], eps, s0=1.0, M0=float(M0[0]))
        scalar = (f_s, w_s)
    accs = {p: asclt.accumulators_at(p, d, sigma2, rp.f, rp.V, rp.h, rp.log_dets, cps, rp.log_det0, scalar)
            for p in config.p_set}
    hists = []
    hist = asclt.WeightedHistogram.gaussian_default(sigma2)
    start = 0
    for n in cps:
        hist.add(rp.proj[start:n], rp.f[start:n])
        start = n
        hists.append(asclt.WeightedHistogram(hist.edges.copy(), hist.weights.copy(), hist.total_weight))
    rows = []
    for i, n in enumerate(cps):
        ks = asclt.weighted_ks(hists[i], sigma2) if hists[i].total_weight > 0 else math.nan
        for p in config.p_set:
            rows.append(_asclt_row(rep, seed, n, accs[p][i], ks))
    return rows, accs, hists


def _asclt_row(rep, seed, n, acc: asclt.MomentAccumulator, ks: float) -> dict:
    r = acc.report()
    return {
        "replication": rep, "seed": seed, "n": n, "p": acc.p, "d": acc.d,
        "avg_fV": r["avg_fV"], "target_ell": r["target_ell"], "rel_err_ell": r["rel_err_ell"],
        "avg_ap": r["avg_ap"], "target_lambda": r["target_lambda"], "rel_err_lambda": r["rel_err_lambda"],
        "ks": ks, "avg_scalar": r["avg_scalar"], "avg_a1p": r["avg_a1p"], "log_det": acc.normalizer,
    }


def _run_ar(config: ExperimentConfig, rep: int, seed: int) -> ReplicationReport:
    spec: ARSpec = config.spec()
    d = spec.d
    sigma2 = spec.noise.sigma2
    theta = np.asarray(spec.theta)
    S0 = np.eye(d)
    M0 = _m0(config, S0, theta)
    traj = simulate_ar(spec, config.n_steps, np.random.default_rng(seed))
    rp = replay(traj.phi, traj.eps, traj.x_next, S0=S0, M0=M0, theta=theta,
                direction=config.ks_direction, refresh_interval=config.refresh_interval)
    report = ReplicationReport(rep, seed)
    if sigma2 > 0:
        rows, accs, hists = _asclt_tables(config, rep, seed, rp, d, sigma2, traj.phi, traj.eps, M0)
        report.tables["asclt"] = rows
        report.accumulators = accs
        report.histograms = hists
    L = limiting_matrix_ar(spec) if sigma2 > 0 else np.eye(d)
    ledgers = ledger_checkpoints(rp.resid, traj.eps, rp.err, L, config.checkpoints, config.p_set,
                                 config.q_set, rp.f, rp.V, rp.g)
    moments = {q: spec.noise.even_moment(q) for q in config.q_set}
    est_rows, pred_rows = [], []
    for n, ledger in zip(config.checkpoints, ledgers):
        norm = float(rp.log_dets[n - 1] - rp.log_det0)
        cr = corollary_report(ledger, norm, sigma2 if sigma2 > 0 else 1.0, d, moments)
        err = rp.err[n - 1]
        est = {"replication": rep, "seed": seed, "n": n}
        est.update({f"theta_err_{i}": float(err[i]) for i in range(d)})
        for key in ("G", "GL", "res5", "cvmoy"):
            est.update({f"{key}_{p}": cr[f"{key}_{p}"] for p in config.p_set})
        est["log_det"] = norm
        est_rows.append(est)
        pred = {"replication": rep, "seed": seed, "n": n}
        pred.update({f"C_{p}": cr[f"C_{p}"] for p in config.p_set})
        for q in config.q_set:
            pred[f"Gamma_{2 * q}"] = cr[f"Gamma_{2 * q}"]
            pred[f"Delta_{2 * q}"] = cr[f"Delta_{2 * q}"]
        pred["estmom"] = cr.get("estmom", math.nan)
        for q in config.q_set:
            pred[f"estmoment_{2 * q}"] = cr[f"estmoment_{2 * q}"]
            pred[f"moment_ratio_{2 * q}"] = cr.get(f"moment_ratio_{2 * q}", math.nan)
        pred["log_det"] = norm
        pred_rows.append(pred)
    report.tables["estimation"] = est_rows
    report.tables["prediction"] = pred_rows
    report.extras["L"] = L.tolist()
    return report


def _run_branching(config: ExperimentConfig, rep: int, seed: int) -> ReplicationReport:
    spec: BranchingSpec = config.spec()
    chain_ss, stat_a, stat_b = np.random.SeedSequence(seed).spawn(3)
    path = simulate_branching(spec, config.n_steps, np.random.default_rng(chain_ss))
    traj = branching_trajectory(path, spec)
    theta, eta = spec.theta, spec.eta
    I2 = np.eye(2)
    mean = replay(traj.phi, traj.eps, traj.x_next, S0=I2, M0=-theta, theta=theta,
                  refresh_interval=config.refresh_interval)
    x = path.x[:-1].astype(float)
    c = x + 1.0
    eps_hat = mean.resid * np.sqrt(c)
    phi_v = np.stack((x, np.ones_like(x)), axis=1) / c[:, None]
    z_v = eps_hat**2 / c
    var = replay(phi_v, z_v - phi_v @ eta, z_v, S0=I2, M0=-eta, theta=eta,
                 refresh_interval=config.refresh_interval)
    st = config.stationary
    est_a = stationary_matrix_estimates(spec, int(st["burn_in"]), int(st["samples"]), np.random.default_rng(stat_a))
    est_b = stationary_matrix_estimates(spec, int(st["burn_in"]), int(st["samples"]), np.random.default_rng(stat_b))
    rows = []
    for n in config.checkpoints:
        th = mean.err[n - 1] + theta
        et = var.err[n - 1] + eta
        row = {"replication": rep, "seed": seed, "n": n, "m_hat": float(th[0]), "lambda_hat": float(th[1]),
               "sigma2_hat": float(et[0]), "b2_hat": float(et[1])}
        for p in config.p_set:
            row[f"theta_stat_{p}"] = eta_error_statistic(mean.err, est_a["L_hat"], p, n)
            row[f"eta_stat_{p}"] = eta_error_statistic(var.err, est_a["Lambda_hat"], p, n)
        rows.append(row)
    report = ReplicationReport(rep, seed)
    report.tables["branching"] = rows
    report.extras["stationary"] = [_jsonable(est_a), _jsonable(est_b)]
    return report


def _probe_stream(config: ExperimentConfig, seed: int):
    """Regressors, noise and the prior/M0 for the conjecture probe or an AR control run."""
    if config.model_type == "ar":
        spec = config.spec()
        traj = simulate_ar(spec, config.n_steps, np.random.default_rng(seed))
        S0 = np.eye(spec.d)
        return traj.phi, traj.eps, S0, _m0(config, S0, spec.theta)
    noise = config.spec()
    phi_ss, eps_ss = np.random.SeedSequence(seed).spawn(2)
    steps = 2.0 * np.random.default_rng(phi_ss).integers(0, 2, config.n_steps) - 1.0
    walk = np.concatenate(([0.0], np.cumsum(steps)[:-1]))
    phi = np.stack((np.ones(config.n_steps), walk), axis=1)
    eps = np.asarray(draw_noise(noise, np.random.default_rng(eps_ss), config.n_steps), dtype=float)
    return phi, eps, np.eye(2), np.zeros(2)


def _run_probe(config: ExperimentConfig, rep: int, seed: int) -> ReplicationReport:
    phi, eps, S0, M0 = _probe_stream(config, seed)
    rp = replay(phi, eps, None, S0=S0, M0=M0, refresh_interval=config.refresh_interval)
    rows = []
    accs = {}
    for p in config.p_set:
        c_fV = np.cumsum(rp.f * rp.V**p)
        c_ap = np.cumsum(rp.V**p - rp.h**p)
        run_fV = run_ap = -math.inf
        accs[p] = []
        for n in config.checkpoints:
            norm = float(rp.log_dets[n - 1] - rp.log_det0)
            s_fV = float(c_fV[n - 1]) / norm
            s_ap = float(c_ap[n - 1]) / norm
            run_fV, run_ap = max(run_fV, s_fV), max(run_ap, s_ap)
            rows.append({"replication": rep, "seed": seed, "n": n, "p": p, "stat_fV": s_fV, "stat_ap": s_ap,
                         "max_fV": run_fV, "max_ap": run_ap, "log_det": norm})
    rows.sort(key=lambda r: (r["n"], r["p"]))
    report = ReplicationReport(rep, seed)
    report.tables["probe"] = rows
    return report


RUNNERS = {"ar": _run_ar, "branching": _run_branching, "probe": _run_probe}


def run_replication(config: ExperimentConfig, rep: int, probe: bool = False) -> ReplicationReport:
    seed = replication_seed(config.seed, rep)
    runner = _run_probe if probe else RUNNERS[config.model_type]
    t0 = time.perf_counter()
    try:
        report = runner(config, rep, seed)
    except Exception as exc:  # replication isolation
        log.exception("replication %d (seed %d) failed", rep, seed)
        report = ReplicationReport(rep, seed, status="failed", error=f"{type(exc).__name__}: {exc}")
    report.wall_time = time.perf_counter() - t0
    return report


def _run_one(args):
    config, rep, probe = args
    return run_replication(config, rep, probe)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    replications: list
    merged: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)
    probe: bool = False

    @property
    def ok(self) -> list:
        return [r for r in self.replications if r.status == "ok"]

    @property
    def failures(self) -> list:
        return [r for r in self.replications if r.status != "ok"]

    def table(self, name: str) -> list:
        return [row for r in self.ok for row in r.tables.get(name, [])]

    def all_pass(self) -> bool:
        return not self.failures and all(v["passed"] for v in self.verdicts)


def run_experiment(config: ExperimentConfig, probe: bool = False,
                   replication_ids=None) -> ExperimentResult:
    """Run all replications (optionally a subset) and merge their reports."""
    from .verdicts import evaluate

    ids = list(range(config.replications)) if replication_ids is None else list(replication_ids)
    jobs = [(config, r, probe) for r in ids]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            reports = list(pool.map(_run_one, jobs))
    else:
        reports = [_run_one(j) for j in jobs]
    result = ExperimentResult(config=config, replications=reports, probe=probe)
    result.merged = merge_reports(config, result.ok, probe)
    result.verdicts = evaluate(result)
    return result


_LOGDET_WEIGHTED = ("avg_fV", "avg_ap", "avg_a1p", "avg_scalar", "estmom", "stat_fV", "stat_ap")
_LOGDET_PREFIX = ("cvmoy_",)


def _weighted_mean(rows: list, key: str) -> float:
    if key in _LOGDET_WEIGHTED or key.startswith(_LOGDET_PREFIX):
        w = np.array([r["log_det"] for r in rows])
        return float(np.sum(w * np.array([r[key] for r in rows])) / np.sum(w))
    return float(np.mean([r[key] for r in rows]))


def _merge_table(rows: list, keys: tuple, skip=("replication", "seed")) -> list:
    groups: dict = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    merged = []
    for key in sorted(groups):
        grp = groups[key]
        out = {"replications": len(grp)}
        for col in grp[0]:
            if col in skip:
                continue
            if col in keys or col == "d":
                out[col] = grp[0][col]
            elif col == "log_det":
                out[col] = float(np.sum([r[col] for r in grp]))
            elif col.startswith("max_"):
                out[col] = float(np.mean([r[col] for r in grp]))
            else:
                out[col] = _weighted_mean(grp, col)
        merged.append(out)
    return merged


def merge_reports(config: ExperimentConfig, reports: list, probe: bool = False) -> dict:
    """Merge replications per checkpoint.

    Log-determinant normalized statistics are merged through the accumulator
    contract (log d-weighted means); ``ks`` is recomputed on the pooled
    histogram; other fields are plain means over replications.
    """
    merged: dict = {}
    if not reports:
        return merged
    if probe:
        merged["probe"] = _merge_table([r for rep in reports for r in rep.tables["probe"]], ("n", "p"))
        return merged
    if "asclt" in reports[0].tables:
        rows = []
        sigma2 = config.spec().noise.sigma2
        for i, n in enumerate(config.checkpoints):
            hist = reports[0].histograms[i]
            for rep in reports[1:]:
                hist = hist.merge(rep.histograms[i])
            ks = asclt.weighted_ks(hist, sigma2) if hist.total_weight > 0 else math.nan
            for p in config.p_set:
                acc = reports[0].accumulators[p][i]
                for rep in reports[1:]:
                    acc = acc.merge(rep.accumulators[p][i])
                row = _asclt_row("merged", config.seed, n, acc, ks)
                del row["replication"], row["seed"]
                row["replications"] = len(reports)
                rows.append(row)
        merged["asclt"] = rows
    for name in ("estimation", "prediction", "branching"):
        if name in reports[0].tables:
            merged[name] = _merge_table([r for rep in reports for r in rep.tables[name]], ("n",))
    return merged


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


TABLE_NAMES = ("asclt", "estimation", "prediction", "branching", "probe")


def _write_csv(path: Path, rows: list, fields: list) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def table_fields(config: ExperimentConfig, name: str) -> list:
    """Column order of a per-replication table; merged tables drop ``replication, seed`` and add ``replications``."""
    ps, qs = config.p_set, config.q_set
    head = ["replication", "seed", "n"]
    if name == "asclt":
        return list(ASCLT_FIELDS)
    if name == "probe":
        return list(PROBE_FIELDS)
    if name == "estimation":
        return (head + [f"theta_err_{i}" for i in range(config.dim)]
                + [f"{key}_{p}" for key in ("G", "GL", "res5", "cvmoy") for p in ps] + ["log_det"])
    if name == "prediction":
        return (head + [f"C_{p}" for p in ps]
                + [f"{key}_{2 * q}" for q in qs for key in ("Gamma", "Delta")] + ["estmom"]
                + [f"{key}_{2 * q}" for q in qs for key in ("estmoment", "moment_ratio")] + ["log_det"])
    if name == "branching":
        return (head + ["m_hat", "lambda_hat", "sigma2_hat", "b2_hat"]
                + [f"{key}_{p}" for p in ps for key in ("theta_stat", "eta_stat")])
    raise KeyError(name)


def expected_tables(config: ExperimentConfig, probe: bool) -> tuple:
    if probe:
        return ("probe",)
    return {"ar": ("asclt", "estimation", "prediction"), "branching": ("branching",),
            "probe": ("probe",)}[config.model_type]


def emit_reports(result: ExperimentResult, out_dir=None) -> dict:
    """Write one CSV per table (per-replication and merged) plus ``summary.json``.

    Returns the written paths keyed by table name.
    """
    config = result.config
    out = Path(out_dir if out_dir is not None else config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = {}
    for name in expected_tables(config, result.probe):
        fields = table_fields(config, name)
        _write_csv(out / f"{name}.csv", result.table(name), fields)
        merged_fields = [f for f in fields if f not in ("replication", "seed")] + ["replications"]
        _write_csv(out / f"{name}_merged.csv", result.merged.get(name, []), merged_fields)
        paths[name] = out / f"{name}.csv"
        paths[f"{name}_merged"] = out / f"{name}_merged.csv"
    summary = {
        "name": config.name,
        "config": config.to_dict(),
        "seed_scheme": SEED_SCHEME,
        "base_seed": config.seed,
        "probe": result.probe,
        "replications": [
            {"replication": r.replication, "seed": r.seed, "status": r.status, "error": r.error,
             "wall_time": r.wall_time, "extras": r.extras}
            for r in result.replications
        ],
        "verdicts": result.verdicts,
        "all_pass": result.all_pass(),
        "final": {name: rows[-len(config.p_set):] if name in ("asclt", "probe") else rows[-1:]
                  for name, rows in result.merged.items() if rows},
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True))
    paths["summary"] = summary_path
    return paths


def conjecture_probe(config: ExperimentConfig) -> ExperimentResult:
    """Run the two log-normalized conjecture statistics along the probe (or control) stream.

    Emits trend data and running maxima; the only verdict is finiteness.
    """
    return run_experiment(config, probe=True)
