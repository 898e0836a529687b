"""Command-line front end: single runs, parameter sweeps and the oracle self-test."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import (CSI_VARIANTS, SCHEMES, ConfigError, QuantizerConfig, ScenarioConfig,
                     bundled_config_path, db_to_linear, load_config)

log = logging.getLogger("underlay_cr")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

SWEEP_PARAMS = ("h1_avg_db", "gamma_db", "p_check_1", "eps_check", "su_levels")


@dataclass
class SweepSpec:
    param: str
    values: list
    schemes: list
    seeds: list
    out: str | None = None
    variants: list | None = None

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError(f"unknown sweep parameter {self.param!r}; expected one of {SWEEP_PARAMS}")
        for name in ("values", "schemes", "seeds"):
            if not getattr(self, name):
                raise ConfigError(f"sweep needs a nonempty {name} list")
        for s in self.schemes:
            if s not in SCHEMES:
                raise ConfigError(f"unknown scheme {s!r}; expected one of {SCHEMES}")
        for v in self.variants or ():
            if v not in CSI_VARIANTS:
                raise ConfigError(f"unknown csi variant {v!r}")


def apply_param(cfg: ScenarioConfig, param: str, value) -> ScenarioConfig:
    """Return ``cfg`` with one swept parameter set (dB values converted here)."""
    if param == "h1_avg_db":
        return replace(cfg, avg_gain_sp=float(db_to_linear(value)))
    if param == "gamma_db":
        return replace(cfg, pu_snr=float(db_to_linear(value)))
    if param == "p_check_1":
        return replace(cfg, max_interference=float(value))
    if param == "eps_check":
        return replace(cfg, max_capacity_loss=float(value))
    if param == "su_levels":
        quant = None if math.isinf(float(value)) else QuantizerConfig(levels=int(value))
        return replace(cfg, sensing=replace(cfg.sensing, quantizer=quant))
    raise ConfigError(f"unknown sweep parameter {param!r}")


def _parse_value(text: str) -> float:
    t = text.strip().lower()
    if t in ("inf", "infinity", "∞"):
        return math.inf
    return float(text)


def _split(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


# --------------------------------------------------------------------------
# commands


def _load(args) -> ScenarioConfig:
    path = args.config or bundled_config_path()
    overrides = {"scheme": args.scheme, "seed": args.seed, "horizon": args.horizon,
                 "csi_variant": getattr(args, "csi_variant", None)}
    cfg = load_config(path, **overrides)
    if getattr(args, "calibrate", None):
        cfg = replace(cfg, calibrate_samples=args.calibrate)
    return cfg


def _print_summary(summary: dict, out=None) -> None:
    out = out or sys.stdout
    print(f"scheme={summary['scheme']} variant={summary['csi_variant']} seed={summary['seed']} "
          f"slots={summary['horizon']} (averages after {summary['burn_in']})", file=out)
    print(f"  c2_avg   = {summary['c2_avg']:.4f} bits/s/Hz", file=out)
    print(f"  p2_avg   = {' '.join(f'{v:.4f}' for v in summary['p2_avg'])} W", file=out)
    print(f"  p1_avg   = {summary['p1_avg']:.4f} W", file=out)
    print(f"  eps1_avg = {100 * summary['eps1_avg']:.3f} %", file=out)
    for row in summary["constraints"]:
        if row["relevant"]:
            flag = "VIOLATED" if row["violated"] else "ok"
            label = row["constraint"] + (f"[{row['index']}]" if row["index"] else "")
            print(f"  {label:<16} limit={row['limit']:.4g} realized={row['realized']:.4g} "
                  f"slack={row['slack']:+.4g} {flag}", file=out)
    print(f"  feasible = {summary['feasible']}  ({summary['elapsed_s']:.1f} s)", file=out)


def cmd_simulate(args) -> int:
    from .engine import run, write_summary, write_trace_csv

    cfg = _load(args)
    out = Path(args.out) if args.out else None
    summary_path = Path(args.summary) if args.summary else (out.with_suffix(".json") if out else None)
    result = run(cfg, trace_every=args.trace_every if out else 0,
                 belief_trace=args.belief_trace, alloc_trace=args.alloc_trace)
    summary = result.summary()
    if out:
        write_trace_csv(out, result.columns, result.series)
    if summary_path:
        write_summary(summary_path, summary)
    if not args.quiet:
        _print_summary(summary)
    if args.strict and not summary["feasible"]:
        bad = [r for r in summary["constraints"] if r["relevant"] and r["violated"]]
        names = ", ".join(r["constraint"] + (f"[{r['index']}]" if r["index"] else "") for r in bad)
        print(f"error: constraint violation beyond tolerance: {names}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _sweep_job(job):
    from .engine import run

    cfg, param, value = job
    result = run(cfg)
    post = result.post
    return {"param": param, "value": value, "scheme": cfg.scheme, "csi_variant": cfg.csi_variant,
            "seed": cfg.seed, "c2_avg": post.c2_avg, "p1_avg": post.p1_mean, "eps1_avg": post.eps1_avg,
            "p2_avg": float(np.mean(post.p2_avg)), "feasible": result.report["feasible"]}


SWEEP_COLUMNS = ["param", "value", "scheme", "csi_variant", "seed", "c2_avg", "p1_avg", "eps1_avg",
                 "p2_avg", "feasible"]


def run_sweep(spec: SweepSpec, base: ScenarioConfig, jobs: int = 1) -> list[dict]:
    """One row per (value, scheme, variant, seed), in that nesting order."""
    variants = spec.variants or [base.csi_variant]
    tasks = []
    for value in spec.values:
        cfg_v = apply_param(base, spec.param, value)
        for scheme in spec.schemes:
            for variant in variants:
                for seed in spec.seeds:
                    tasks.append((replace(cfg_v, scheme=scheme, csi_variant=variant, seed=int(seed)),
                                  spec.param, value))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_job, tasks))
    return [_sweep_job(t) for t in tasks]


def write_sweep(rows: list[dict], out) -> None:
    out = Path(out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["param"], r["value"], r["scheme"], r["csi_variant"], r["seed"],
                        f"{r['c2_avg']:.10g}", f"{r['p1_avg']:.10g}", f"{r['eps1_avg']:.10g}",
                        f"{r['p2_avg']:.10g}", int(r["feasible"])])
    with open(out.with_suffix(".json"), "w") as fh:
        json.dump(rows, fh, indent=2, allow_nan=True)
        fh.write("\n")


def cmd_sweep(args) -> int:
    base = _load(args)
    spec = SweepSpec(param=args.param, values=[_parse_value(v) for v in _split(args.values)],
                     schemes=_split(args.schemes), seeds=[int(s) for s in _split(args.seeds)],
                     out=args.out, variants=_split(args.variants) if args.variants else None)
    rows = run_sweep(spec, base, jobs=args.jobs)
    if spec.out:
        write_sweep(rows, spec.out)
    if not args.quiet:
        print(f"{'value':>8} {'scheme':>6} {'variant':>8} {'seed':>5} {'c2_avg':>9} {'p1_avg':>8} "
              f"{'eps1%':>7} {'p2_avg':>7}")
        for r in rows:
            print(f"{r['value']:>8g} {r['scheme']:>6} {r['csi_variant']:>8} {r['seed']:>5} "
                  f"{r['c2_avg']:9.4f} {r['p1_avg']:8.4f} {100 * r['eps1_avg']:7.3f} {r['p2_avg']:7.4f}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return EXIT_OK if run_all(quick=args.quick) else EXIT_FAIL


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="underlay-cr", description=__doc__)
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_flags(p):
        p.add_argument("--config", help="scenario file (default: bundled paper_sec6.cfg)")
        p.add_argument("--scheme", choices=SCHEMES)
        p.add_argument("--seed", type=int)
        p.add_argument("--horizon", type=int, help="number of slots")
        p.add_argument("--csi-variant", dest="csi_variant", choices=CSI_VARIANTS)
        p.add_argument("--calibrate", type=int, metavar="SAMPLES",
                       help="warm-start multipliers by offline Monte-Carlo dual ascent")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("simulate", help="run one scenario")
    scenario_flags(p)
    p.add_argument("--out", help="metrics trace CSV (summary JSON written next to it)")
    p.add_argument("--summary", help="summary JSON path (default: OUT with .json suffix)")
    p.add_argument("--trace-every", type=int, default=1, help="trace row spacing in slots")
    p.add_argument("--belief-trace", help="line-delimited JSON dump of every belief")
    p.add_argument("--alloc-trace", help="CSV dump of (slot, k, m, phi, power, cap)")
    p.add_argument("--strict", action="store_true",
                   help="exit nonzero when a relevant constraint is violated beyond tolerance")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="sweep one parameter over schemes and seeds")
    scenario_flags(p)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma separated values ('inf' allowed for su_levels)")
    p.add_argument("--schemes", required=True, help="comma separated schemes")
    p.add_argument("--seeds", default="0", help="comma separated seeds")
    p.add_argument("--variants", help="comma separated CSI variants (default: from config)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", help="summary CSV (JSON mirror written next to it)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selftest", help="run the oracle checks")
    p.add_argument("--quick", action="store_true", help="reduced sample counts")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
