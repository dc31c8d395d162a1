"""Command-line front end.

    mergesim --config experiment.json --out results/
    mergesim --config experiment.json --modes barrier,base,partial,full
    mergesim --config experiment.json --sweep entries_per_port=8..64:8

Exit codes: 0 success, 2 configuration error, 3 runtime failure
(deadlock, protocol fault, or aborted run).  On a configuration error
nothing is written.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .config import build_workload, example_config, load_config
from .errors import ConfigError, InternalFault, ProtocolFault
from .runner import ExperimentConfig, Simulation
from .workloads import ExecMode

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_SWEEPABLE = {"entries_per_port", "merge_timeout_ns", "lead_threshold",
              "seed", "n_switches"}


def _parse_modes(arg: str) -> list[ExecMode]:
    modes = []
    for tok in arg.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            modes.append(ExecMode(tok))
        except ValueError:
            raise ConfigError("--modes", f"unknown mode '{tok}' "
                              f"(one of {[m.value for m in ExecMode]})") from None
    if not modes:
        raise ConfigError("--modes", "no modes given")
    return modes


def _parse_sweep(arg: str) -> tuple[str, list[int]]:
    """``key=lo..hi[:step]`` or ``key=v1,v2,v3`` over integer config fields."""
    if "=" not in arg:
        raise ConfigError("--sweep", f"expected key=lo..hi, got '{arg}'")
    key, _, rng = arg.partition("=")
    key = key.strip()
    if key not in _SWEEPABLE:
        raise ConfigError("--sweep", f"'{key}' is not sweepable "
                          f"(one of {sorted(_SWEEPABLE)})")
    try:
        if ".." in rng:
            span, _, step_s = rng.partition(":")
            lo_s, _, hi_s = span.partition("..")
            lo, hi = int(lo_s), int(hi_s)
            step = int(step_s) if step_s else max(1, (hi - lo) // 8 or 1)
            if hi < lo or step < 1:
                raise ValueError
            values = list(range(lo, hi + 1, step))
        else:
            values = [int(v) for v in rng.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("--sweep", f"cannot parse range '{rng}'") from None
    if not values:
        raise ConfigError("--sweep", "empty sweep range")
    return key, values


def _run_one(cfg: ExperimentConfig, wl_spec: dict, outdir: str | None):
    workload = build_workload(wl_spec, cfg.n_gpus)
    result = Simulation(cfg, workload).run()
    if outdir:
        result.write_artifacts(outdir)
    return result


def _print_table(rows: list[dict], stream) -> None:
    if not rows:
        return
    base = rows[0]["makespan_ns"] or 1
    header = f"{'run':<28} {'makespan_ns':>12} {'normalized':>10} " \
             f"{'util':>6} {'hit_rate':>8} {'merged':>7}"
    print(header, file=stream)
    print("-" * len(header), file=stream)
    for r in rows:
        print(f"{r['label']:<28} {r['makespan_ns']:>12} "
              f"{r['makespan_ns'] / base:>10.3f} {r['util']:>6.2f} "
              f"{r['hit_rate']:>8.3f} {str(r['fully_merged']):>7}", file=stream)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="mergesim",
        description="Event-driven simulator for switch-side request merging "
                    "in multi-GPU fabrics.")
    ap.add_argument("--config", help="experiment JSON")
    ap.add_argument("--print-config", action="store_true",
                    help="print an example config and exit")
    ap.add_argument("--modes", help="comma-separated execution modes to run")
    ap.add_argument("--sweep", help="key=lo..hi[:step] integer parameter sweep")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", help="output directory for run artifacts")
    ap.add_argument("--trace-links", help="comma-separated link ids to trace")
    ap.add_argument("--jobs", type=int, default=1,
                    help="parallel worker processes (default 1)")
    ap.add_argument("--quiet", action="store_true", help="suppress the table")
    args = ap.parse_args(argv)

    if args.print_config:
        json.dump(example_config(), sys.stdout, indent=2, sort_keys=True)
        print()
        return EXIT_OK
    if not args.config:
        print("error: --config is required (or --print-config)", file=sys.stderr)
        return EXIT_CONFIG

    try:
        cfg, wl_spec = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.trace_links:
            try:
                ids = tuple(int(x) for x in args.trace_links.split(",") if x.strip())
            except ValueError:
                raise ConfigError("--trace-links", "expected integer ids") from None
            cfg = dataclasses.replace(cfg, trace_link_ids=ids)
        modes = _parse_modes(args.modes) if args.modes else [cfg.mode]
        sweep = _parse_sweep(args.sweep) if args.sweep else None
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be >= 1")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    jobs: list[tuple[str, ExperimentConfig]] = []
    for mode in modes:
        mode_cfg = dataclasses.replace(cfg, mode=mode)
        if sweep is None:
            jobs.append((mode.value, mode_cfg))
        else:
            key, values = sweep
            for v in values:
                jobs.append((f"{mode.value}_{key}={v}",
                             dataclasses.replace(mode_cfg, **{key: v})))

    try:
        for _, job_cfg in jobs:
            job_cfg.validate()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    results = []
    try:
        if args.jobs > 1 and len(jobs) > 1:
            import concurrent.futures as cf
            with cf.ProcessPoolExecutor(max_workers=args.jobs) as pool:
                futs = [(label, pool.submit(
                    _run_one, job_cfg, wl_spec,
                    os.path.join(args.out, label) if args.out else None))
                    for label, job_cfg in jobs]
                run_results = [(label, f.result()) for label, f in futs]
        else:
            run_results = []
            for label, job_cfg in jobs:
                outdir = os.path.join(args.out, label) if args.out else None
                run_results.append((label, _run_one(job_cfg, wl_spec, outdir)))
    except (ProtocolFault, InternalFault) as e:
        print(f"runtime fault: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    failed = False
    for label, r in run_results:
        if r.aborted or not r.completed:
            print(f"run '{label}' aborted: {r.aborted or 'incomplete'}",
                  file=sys.stderr)
            failed = True
        results.append({
            "label": label,
            "makespan_ns": r.makespan_ns,
            "util": r.counters.mean_utilization(r.makespan_ns),
            "hit_rate": r.merge["hit_rate"],
            "fully_merged": r.fully_merged,
        })

    if not args.quiet:
        _print_table(results, sys.stdout)
    return EXIT_RUNTIME if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
