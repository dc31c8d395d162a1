"""Figure CLI over simulator output directories.

    mergeplot --runs results/ --out figures/
    mergeplot --kind histogram --inputs a/spreads.csv b/spreads.csv --out f.png

``--runs`` walks the per-run layout the simulator writes (one directory
per run label) and renders every figure kind whose inputs exist.  Exit
codes match the simulator: 0 success, 2 bad arguments or bad artifacts.
"""

from __future__ import annotations

import argparse
import os
import sys

from .figures import FIGURE_KINDS, PlotSpec, render
from .schema import SchemaError

EXIT_OK = 0
EXIT_CONFIG = 2


def _find_runs(root: str) -> list[str]:
    runs = []
    for entry in sorted(os.listdir(root)):
        path = os.path.join(root, entry)
        if os.path.isdir(path) and os.path.exists(
                os.path.join(path, "summary.json")):
            runs.append(path)
    return runs


def _specs_for_tree(root: str, out: str, kinds: list[str]) -> list[PlotSpec]:
    runs = _find_runs(root)
    if not runs:
        raise FileNotFoundError(f"no run directories under {root}")
    specs = []

    def gather(name: str) -> tuple[str, ...]:
        return tuple(p for d in runs
                     if os.path.exists(p := os.path.join(d, name)))

    if "timeseries" in kinds and gather("utilization.csv"):
        specs.append(PlotSpec("timeseries", gather("utilization.csv"),
                              os.path.join(out, "utilization_timeseries.png")))
    if "bars" in kinds and gather("summary.json"):
        specs.append(PlotSpec("bars", gather("summary.json"),
                              os.path.join(out, "makespan_bars.png")))
    if "sensitivity" in kinds and gather("summary.json"):
        specs.append(PlotSpec("sensitivity", gather("summary.json"),
                              os.path.join(out, "table_sensitivity.png")))
    if "histogram" in kinds and gather("spreads.csv"):
        specs.append(PlotSpec("histogram", gather("spreads.csv"),
                              os.path.join(out, "spread_histogram.png")))
    return specs


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="mergeplot",
        description="Render figures from simulator run artifacts.")
    ap.add_argument("--runs", help="results directory written by the simulator")
    ap.add_argument("--inputs", nargs="+", help="explicit artifact files")
    ap.add_argument("--kind", choices=FIGURE_KINDS,
                    help="figure kind (required with --inputs)")
    ap.add_argument("--kinds", default=",".join(FIGURE_KINDS),
                    help="comma-separated kinds to render with --runs")
    ap.add_argument("--out", required=True,
                    help="output file (--inputs) or directory (--runs)")
    args = ap.parse_args(argv)

    try:
        if args.inputs:
            if not args.kind:
                raise ValueError("--kind is required with --inputs")
            specs = [PlotSpec(args.kind, tuple(args.inputs), args.out)]
        elif args.runs:
            kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
            for k in kinds:
                if k not in FIGURE_KINDS:
                    raise ValueError(f"unknown figure kind '{k}' "
                                     f"(one of {list(FIGURE_KINDS)})")
            specs = _specs_for_tree(args.runs, args.out, kinds)
        else:
            raise ValueError("one of --runs or --inputs is required")
        written = []
        for spec in specs:
            written.extend(render(spec))
    except (ValueError, OSError, SchemaError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
