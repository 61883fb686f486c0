"""Command line entry point: ``simulate``, ``verify``, ``asclt-report``, ``probe-conjecture``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .harness import ConfigError, ExperimentConfig, conjecture_probe, emit_reports, env_seed, run_experiment
from .verify import identity_suite, oracle_suite

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _config(args) -> ExperimentConfig:
    overrides = {"seed": args.seed, "output_dir": args.out, "replications": args.replications,
                 "n_steps": args.steps}
    if args.config:
        return ExperimentConfig.load(args.config, **overrides)
    return ExperimentConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def _print_verdicts(verdicts: list) -> None:
    for v in verdicts:
        tag = "PASS" if v["passed"] else "FAIL"
        print(f"[{tag}] {v['criterion']}: value={v['value']} ({v['threshold']}) {v['detail']}".rstrip())


def _run(args, probe: bool = False):
    cfg = _config(args)
    result = conjecture_probe(cfg) if probe else run_experiment(cfg)
    paths = emit_reports(result)
    print(f"wrote {len(paths)} files to {cfg.output_dir}")
    return result


def cmd_simulate(args) -> int:
    result = _run(args)
    _print_verdicts(result.verdicts)
    return EXIT_PASS if result.all_pass() else EXIT_FAIL


def cmd_asclt_report(args) -> int:
    result = _run(args)
    rows = result.merged.get("asclt", [])
    if not rows:
        print("no moment statistics for this model", file=sys.stderr)
        return EXIT_FAIL
    print(f"{'n':>9} {'p':>2} {'avg_fV':>10} {'ell':>8} {'avg_ap':>10} {'lambda':>8} {'ks':>7}")
    for r in rows:
        print(f"{r['n']:>9} {r['p']:>2} {r['avg_fV']:>10.4f} {r['target_ell']:>8.3g} "
              f"{r['avg_ap']:>10.4f} {r['target_lambda']:>8.3g} {r['ks']:>7.4f}")
    _print_verdicts(result.verdicts)
    return EXIT_PASS if result.all_pass() else EXIT_FAIL


def cmd_probe(args) -> int:
    result = _run(args, probe=True)
    print(f"{'n':>9} {'p':>2} {'stat_fV':>10} {'stat_ap':>10} {'max_fV':>10} {'max_ap':>10}")
    for r in result.merged.get("probe", []):
        print(f"{r['n']:>9} {r['p']:>2} {r['stat_fV']:>10.4f} {r['stat_ap']:>10.4f} "
              f"{r['max_fV']:>10.4f} {r['max_ap']:>10.4f}")
    _print_verdicts(result.verdicts)
    return EXIT_PASS if result.all_pass() else EXIT_FAIL


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else env_seed()
    n = args.steps if args.steps is not None else 10_000
    ok = True
    for name, res in (("identities", identity_suite(n_steps=n, seed=seed)), ("oracle", oracle_suite(seed=seed))):
        ok &= res["passed"]
        tag = "PASS" if res["passed"] else "FAIL"
        print(f"[{tag}] {name} (tol {res['tol']:g}, {res['seconds']:.2f}s): {json.dumps(res['residuals'])}")
    return EXIT_PASS if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asclt-lab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, help_ in (
        ("simulate", cmd_simulate, "run an experiment and write reports"),
        ("verify", cmd_verify, "identity and dense-oracle suites on small instances"),
        ("asclt-report", cmd_asclt_report, "moment convergence table"),
        ("probe-conjecture", cmd_probe, "log-normalized statistics on the probe stream"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="base seed (default: $ASCLT_LAB_SEED or 2008)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--replications", type=int)
        p.add_argument("--steps", type=int)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
