"""In-harness pass/fail verdicts for the Monte Carlo acceptance checks."""
from __future__ import annotations

import math

import numpy as np

from .asclt import gaussian_even_moment, target_ell, target_lambda

# relative tolerances by p for the log-averaged moment statistics
SCALAR_TOL = {1: 0.15, 2: 0.25}
VECTOR_TOL = {1: 0.15, 2: 0.30}
A1_SQUARE_MAX = 0.1
A1_TOL = 0.15
ESTMOM_TOL = 0.20
ESTMOMENT_SPREAD = 10.0
RES5_TOL = 0.30
BRANCHING_THETA_TOL = 0.02
BRANCHING_ETA_TOL = 0.10
CROSS_SEED_SE = 3.0
KS_MAX = 0.1
KS_GRID = (10_000, 100_000, 1_000_000)


def verdict(name: str, passed: bool, value, threshold, detail: str = "") -> dict:
    return {"criterion": name, "passed": bool(passed), "value": value, "threshold": threshold, "detail": detail}


def _rel(x: float, target: float) -> float:
    return abs(x - target) / abs(target)


def _final_rows(rows: list, n: int) -> dict:
    return {r["p"]: r for r in rows if r["n"] == n}


def ar_verdicts(result) -> list:
    cfg = result.config
    spec = cfg.spec()
    d, sigma2 = spec.d, spec.noise.sigma2
    n = cfg.checkpoints[-1]
    out = []
    asclt_rows = result.merged.get("asclt", [])
    final = _final_rows(asclt_rows, n)
    if d == 1:
        for p, tol in SCALAR_TOL.items():
            if p in final:
                target = gaussian_even_moment(p, sigma2)
                val = final[p]["avg_scalar"]
                err = _rel(val, target)
                out.append(verdict(f"scalar_moment_p{p}", err <= tol, val, f"within {tol:.0%} of {target:g}",
                                   f"rel_err={err:.4f}"))
    else:
        for p, tol in VECTOR_TOL.items():
            if p in final:
                for key, target in (("avg_fV", target_ell(p, d, sigma2)), ("avg_ap", target_lambda(p, d, sigma2))):
                    val = final[p][key]
                    err = _rel(val, target)
                    out.append(verdict(f"vector_{key}_p{p}", err <= tol, val, f"within {tol:.0%} of {target:g}",
                                       f"rel_err={err:.4f}"))
        if 2 in final:
            val = final[2]["avg_a1p"]
            out.append(verdict("a1_square_vanishes", val <= A1_SQUARE_MAX, val, f"<= {A1_SQUARE_MAX}"))
        if 1 in final:
            val = final[1]["avg_a1p"]
            err = _rel(val, sigma2)
            out.append(verdict("a1_mean_p1", err <= A1_TOL, val, f"within {A1_TOL:.0%} of {sigma2:g}",
                               f"rel_err={err:.4f}"))
    if d == 1:
        pred = result.merged.get("prediction", [])
        if pred:
            val = pred[-1]["estmom"]
            err = _rel(val, sigma2)
            out.append(verdict("estmom", err <= ESTMOM_TOL, val, f"within {ESTMOM_TOL:.0%} of {sigma2:g}",
                               f"rel_err={err:.4f}"))
            if "estmoment_4" in pred[-1]:
                series = np.array([r["estmoment_4"] for r in pred])
                med = float(np.median(series))
                mx = float(np.max(series))
                out.append(verdict("estmoment_4_bounded", mx <= ESTMOMENT_SPREAD * med, mx,
                                   f"<= {ESTMOMENT_SPREAD:g} x median ({med:.4g})",
                                   "series=" + ",".join(f"{v:.4g}" for v in series)))
        est = result.merged.get("estimation", [])
        if est and "res5_1" in est[-1]:
            target = target_ell(1, d, sigma2)
            val = est[-1]["res5_1"]
            err = _rel(val, target)
            out.append(verdict("res5_p1", err <= RES5_TOL, val, f"within {RES5_TOL:.0%} of {target:g}",
                               f"rel_err={err:.4f}"))
            first = est[0]["res5_1"]
            toward = abs(val - target) <= abs(first - target)
            out.append(verdict("res5_p1_trend", toward, val, f"closer to {target:g} than n={est[0]['n']} value",
                               f"first={first:.4f}"))
        ks = {r["n"]: r["ks"] for r in asclt_rows}
        if n in ks:
            out.append(verdict("ks_final", ks[n] <= KS_MAX, ks[n], f"<= {KS_MAX}"))
        grid = [g for g in KS_GRID if g in ks]
        if len(grid) >= 2:
            vals = [ks[g] for g in grid]
            dec = all(b < a for a, b in zip(vals, vals[1:]))
            out.append(verdict("ks_decreasing", dec, vals, "strictly decreasing over " + ",".join(map(str, grid))))
    return out


def branching_verdicts(result) -> list:
    spec = result.config.spec()
    truth = {"m_hat": spec.m, "lambda_hat": spec.lam, "sigma2_hat": spec.sigma2, "b2_hat": spec.b2}
    out = []
    for rep in result.ok:
        row = rep.tables["branching"][-1]
        for key, target in truth.items():
            tol = BRANCHING_THETA_TOL if key in ("m_hat", "lambda_hat") else BRANCHING_ETA_TOL
            err = _rel(row[key], target)
            out.append(verdict(f"{key}_r{rep.replication}", err <= tol, row[key],
                               f"within {tol:.0%} of {target:g}", f"rel_err={err:.4f}"))
        a, b = rep.extras["stationary"]
        for mat in ("L_hat", "Lambda_hat"):
            pd = all(np.all(np.linalg.eigvalsh(np.array(e[mat])) > 0) for e in (a, b))
            out.append(verdict(f"{mat}_positive_definite_r{rep.replication}", pd, None, "eigenvalues > 0"))
            se = mat.replace("hat", "se")
            diff = np.abs(np.array(a[mat]) - np.array(b[mat]))
            bound = CROSS_SEED_SE * np.sqrt(np.array(a[se]) ** 2 + np.array(b[se]) ** 2)
            z = float(np.max(diff / bound)) * CROSS_SEED_SE
            out.append(verdict(f"{mat}_cross_seed_r{rep.replication}", bool(np.all(diff <= bound)), z,
                               f"<= {CROSS_SEED_SE:g} combined SE"))
    return out


def probe_verdicts(result) -> list:
    rows = result.table("probe")
    finite = bool(rows) and all(math.isfinite(r[k]) for r in rows for k in ("stat_fV", "stat_ap"))
    return [verdict("probe_finite", finite, len(rows), "all statistics finite")]


def evaluate(result) -> list:
    out = [verdict(f"replication_{r.replication}", False, None, "completes", r.error) for r in result.failures]
    if not result.ok:
        return out
    if result.probe or result.config.model_type == "probe":
        return out + probe_verdicts(result)
    if result.config.model_type == "branching":
        return out + branching_verdicts(result)
    if result.config.spec().noise.sigma2 <= 0:
        return out
    return out + ar_verdicts(result)
