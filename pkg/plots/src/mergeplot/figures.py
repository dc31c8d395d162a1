"""The four figure kinds regenerated from run artifacts.

Every figure is written as a vector/raster pair (.svg and .png) with a
pinned style and pinned ordering, so re-rendering the same inputs gives
the same bytes.  Inputs are never modified.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from statistics import mean

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .schema import SPREAD_COLUMNS, UTILIZATION_COLUMNS, read_summary, read_table

FIGURE_KINDS = ("timeseries", "bars", "sensitivity", "histogram")

STYLE = {
    "figsize": (7.0, 2.2),          # per panel
    "dpi": 120,
    "grid_alpha": 0.3,
    "up_color": "#1f77b4",
    "down_color": "#d62728",
    "bar_colors": ("#7f7f7f", "#1f77b4", "#2ca02c", "#d62728"),
    "hist_bins": 40,
    "svg_hashsalt": "mergeplot",
}

# Canonical mode ordering for bar groups and line legends.
MODE_ORDER = ("barrier", "base", "partial", "full")


@dataclass(frozen=True)
class PlotSpec:
    kind: str
    inputs: tuple[str, ...]
    out: str

    def validate(self) -> None:
        if self.kind not in FIGURE_KINDS:
            raise ValueError(f"unknown figure kind '{self.kind}' "
                             f"(one of {list(FIGURE_KINDS)})")
        if not self.inputs:
            raise ValueError("no input files given")


def _label_for(path: str) -> str:
    parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
    return parent or os.path.splitext(os.path.basename(path))[0]


def _mode_rank(label: str) -> tuple[int, str]:
    for i, m in enumerate(MODE_ORDER):
        if label == m or label.startswith(m + "_"):
            return (i, label)
    return (len(MODE_ORDER), label)


def _save(fig, out: str) -> list[str]:
    base, ext = os.path.splitext(out)
    if ext not in (".png", ".svg"):
        base = out
    svg, png = base + ".svg", base + ".png"
    os.makedirs(os.path.dirname(os.path.abspath(svg)), exist_ok=True)
    plt.rcParams["svg.hashsalt"] = STYLE["svg_hashsalt"]
    fig.savefig(svg, metadata={"Date": None})
    fig.savefig(png, dpi=STYLE["dpi"])
    plt.close(fig)
    return [svg, png]


def _timeseries(spec: PlotSpec) -> list[str]:
    """One panel per run: mean link utilization over time, up and down."""
    inputs = sorted(spec.inputs, key=lambda p: _mode_rank(_label_for(p)))
    n = len(inputs)
    fig, axes = plt.subplots(
        n, 1, squeeze=False,
        figsize=(STYLE["figsize"][0], STYLE["figsize"][1] * n))
    for ax, path in zip(axes[:, 0], inputs):
        table = read_table(path, UTILIZATION_COLUMNS)
        series: dict[str, dict[int, list[float]]] = {"up": {}, "down": {}}
        for row in table.rows:
            t, _, direction, util = row
            series[direction].setdefault(int(t), []).append(float(util))
        for direction, color in (("up", STYLE["up_color"]),
                                 ("down", STYLE["down_color"])):
            pts = sorted(series[direction].items())
            ax.plot([t / 1000.0 for t, _ in pts],
                    [mean(v) for _, v in pts],
                    color=color, lw=1.0, label=direction)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("utilization")
        ax.grid(alpha=STYLE["grid_alpha"])
        ax.set_title(_label_for(path), fontsize=9, loc="left")
        ax.legend(loc="upper right", fontsize=7)
    axes[-1, 0].set_xlabel("time (us)")
    fig.tight_layout()
    return _save(fig, spec.out)


def _bars(spec: PlotSpec) -> list[str]:
    """Makespans per mode, grouped by workload, normalized to barrier."""
    summaries = [read_summary(p) for p in sorted(spec.inputs)]
    groups: dict[str, dict[str, int]] = {}
    for s in summaries:
        groups.setdefault(s["workload"], {})[s["mode"]] = s["makespan_ns"]
    fig, ax = plt.subplots(figsize=(STYLE["figsize"][0], 3.0))
    workloads = sorted(groups)
    modes = [m for m in MODE_ORDER
             if any(m in g for g in groups.values())]
    width = 0.8 / max(1, len(modes))
    for mi, mode in enumerate(modes):
        xs, ys = [], []
        for wi, wl in enumerate(workloads):
            if mode not in groups[wl]:
                continue
            ref = groups[wl].get("barrier") or next(iter(groups[wl].values()))
            xs.append(wi + mi * width)
            ys.append(groups[wl][mode] / ref)
        ax.bar(xs, ys, width=width, label=mode,
               color=STYLE["bar_colors"][mi % len(STYLE["bar_colors"])])
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(workloads))])
    ax.set_xticklabels(workloads, fontsize=8)
    ax.set_ylabel("normalized makespan")
    ax.axhline(1.0, color="black", lw=0.6, ls=":")
    ax.grid(axis="y", alpha=STYLE["grid_alpha"])
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, spec.out)


def _sensitivity(spec: PlotSpec) -> list[str]:
    """Makespan as a function of merge-table size, one line per mode."""
    lines: dict[str, list[tuple[int, int]]] = {}
    for path in sorted(spec.inputs):
        s = read_summary(path)
        lines.setdefault(s["mode"], []).append(
            (s["entries_per_port"], s["makespan_ns"]))
    fig, ax = plt.subplots(figsize=(STYLE["figsize"][0], 3.0))
    for mode in sorted(lines, key=_mode_rank):
        pts = sorted(lines[mode])
        ax.plot([e for e, _ in pts], [mk / 1000.0 for _, mk in pts],
                marker="o", ms=3, lw=1.2, label=mode)
    ax.set_xlabel("merge-table entries per port")
    ax.set_ylabel("makespan (us)")
    ax.grid(alpha=STYLE["grid_alpha"])
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, spec.out)


def _histogram(spec: PlotSpec) -> list[str]:
    """Per-address arrival-spread distribution, overlaid per run."""
    inputs = sorted(spec.inputs, key=lambda p: _mode_rank(_label_for(p)))
    fig, ax = plt.subplots(figsize=(STYLE["figsize"][0], 3.0))
    for path in inputs:
        table = read_table(path, SPREAD_COLUMNS)
        spreads = [v / 1000.0 for v in table.ints("spread_ns")]
        if spreads:
            ax.hist(spreads, bins=STYLE["hist_bins"], alpha=0.55,
                    label=_label_for(path))
    ax.set_xlabel("per-address arrival spread (us)")
    ax.set_ylabel("addresses")
    ax.grid(alpha=STYLE["grid_alpha"])
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, spec.out)


_RENDERERS = {
    "timeseries": _timeseries,
    "bars": _bars,
    "sensitivity": _sensitivity,
    "histogram": _histogram,
}


def render(spec: PlotSpec) -> list[str]:
    """Render one figure; returns the paths written (svg then png)."""
    spec.validate()
    return _RENDERERS[spec.kind](spec)
