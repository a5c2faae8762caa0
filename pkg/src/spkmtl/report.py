"""Plain-text comparison tables and SVG probe-curve plots."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .probe import ProbeReport

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


@dataclass
class RunSummary:
    name: str
    ler: float | None
    probe: ProbeReport | None


def load_run(run_dir) -> RunSummary:
    """Final eval label error rate from ``train_log.jsonl`` and ``probe.json`` if present."""
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    log_path = os.path.join(run_dir, "train_log.jsonl")
    if not os.path.exists(log_path):
        stage2 = os.path.join(run_dir, "stage2", "train_log.jsonl")
        log_path = stage2 if os.path.exists(stage2) else None
    ler = None
    if log_path:
        with open(log_path) as fh:
            evals = [r for r in map(json.loads, fh) if r.get("type") == "eval"]
        if evals:
            ler = evals[-1]["ler"]
    probe_path = os.path.join(run_dir, "probe.json")
    probe = ProbeReport.load(probe_path) if os.path.exists(probe_path) else None
    return RunSummary(os.path.basename(os.path.normpath(run_dir)), ler, probe)


def table(runs: list[RunSummary]) -> str:
    blocks = sorted({b.block for r in runs if r.probe for b in r.probe.blocks})
    header = ["run", "LER"] + [f"SID@{b}" for b in blocks]
    rows = []
    for r in runs:
        acc = {b.block: b.eval_acc for b in r.probe.blocks} if r.probe else {}
        rows.append([r.name, "-" if r.ler is None else f"{100 * r.ler:.2f}"]
                    + [f"{100 * acc[b]:.1f}" if b in acc else "-" for b in blocks])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                  for i, (c, w) in enumerate(zip(cells, widths)))
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def probe_svg(curves: dict[str, list[tuple[int, float]]], title="SID accuracy per block",
              width=480, height=300) -> str:
    """Line chart of ``{label: [(block, accuracy), ...]}``; accuracy axis fixed to [0, 1]."""
    left, right, top, bottom = 50, 130, 30, 40
    pw, ph = width - left - right, height - top - bottom
    blocks = sorted({b for pts in curves.values() for b, _ in pts}) or [0, 1]
    bmin, bmax = blocks[0], max(blocks[-1], blocks[0] + 1)
    x = lambda b: left + pw * (b - bmin) / (bmax - bmin)  # noqa: E731
    y = lambda a: top + ph * (1.0 - a)  # noqa: E731
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<text x="{left}" y="18" font-size="13">{title}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for a in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(f'<line x1="{left}" x2="{left + pw}" y1="{y(a):.1f}" y2="{y(a):.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y(a) + 4:.1f}" text-anchor="end">{a:.2f}</text>')
    for b in blocks:
        out.append(f'<text x="{x(b):.1f}" y="{top + ph + 15}" text-anchor="middle">{b}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 6}" text-anchor="middle">block</text>')
    for i, (label, pts) in enumerate(curves.items()):
        color = _COLORS[i % len(_COLORS)]
        path = " ".join(f"{x(b):.1f},{y(a):.1f}" for b, a in sorted(pts))
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for b, a in pts:
            out.append(f'<circle cx="{x(b):.1f}" cy="{y(a):.1f}" r="2.5" fill="{color}"/>')
        ly = top + 12 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" x2="{left + pw + 28}" y1="{ly}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(runs: list[RunSummary], out_dir) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    text = table(runs)
    table_path = os.path.join(out_dir, "table.txt")
    with open(table_path, "w") as fh:
        fh.write(text)
    curves = {r.name: [(b.block, b.eval_acc) for b in r.probe.blocks] for r in runs if r.probe}
    plot_path = os.path.join(out_dir, "probe_curves.svg")
    with open(plot_path, "w") as fh:
        fh.write(probe_svg(curves))
    return table_path, plot_path
