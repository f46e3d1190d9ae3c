"""Static reporting: learning-curve SVG, capacity-cluster tables, and
the analytic cost table. SVG is emitted directly as polylines so the
output is dependency-free and diffable."""
from __future__ import annotations

import csv
import json
import os
from fractions import Fraction

import numpy as np

from .config import RunConfig
from .decomp import flops_account, param_count, supported_widths
from .errors import ConfigurationError, FormatError
from .model import build_layout
from .protocol import width_for_capacity

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#7f7f7f")


def read_metrics(run_dir):
    """(label, rows) from one self-describing run directory."""
    path = os.path.join(run_dir, "metrics.csv")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"round", "client_id", "capacity_r", "width_p",
                    "train_loss", "val_acc", "test_acc", "alpha_selected"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise FormatError(f"{path}: unexpected columns {reader.fieldnames}")
        for lineno, raw in enumerate(reader, 2):
            try:
                rows.append({
                    "round": int(raw["round"]),
                    "client_id": int(raw["client_id"]),
                    "capacity_r": float(raw["capacity_r"]),
                    "width_p": Fraction(raw["width_p"]),
                    "train_loss": float(raw["train_loss"]),
                    "val_acc": float(raw["val_acc"]),
                    "test_acc": float(raw["test_acc"]),
                    "alpha_selected": float(raw["alpha_selected"]),
                })
            except (ValueError, ZeroDivisionError) as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
    label = os.path.basename(os.path.normpath(run_dir))
    summary = os.path.join(run_dir, "summary.json")
    if os.path.exists(summary):
        with open(summary) as fh:
            label = json.load(fh)["config"]["method"]
    return label, rows


def mean_test_by_round(rows):
    acc = {}
    for r in rows:
        acc.setdefault(r["round"], []).append(r["test_acc"])
    return [(t, float(np.mean(acc[t]))) for t in sorted(acc)]


def capacity_clusters(rows, bins=5):
    """Mean of each client's last test accuracy per capacity bin.

    Capacities are grouped into `bins` equal-width clusters of (0, 1];
    returns one dict per cluster (empty clusters report count 0).
    """
    last = {}
    for r in rows:
        key = r["client_id"]
        if key not in last or r.get("round", 0) >= last[key].get("round", 0):
            last[key] = r
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = []
    for b in range(bins):
        members = [v for v in last.values()
                   if (edges[b] < v["capacity_r"] <= edges[b + 1])
                   or (b == 0 and v["capacity_r"] <= edges[1])]
        out.append({
            "cluster": b,
            "capacity_low": float(edges[b]),
            "capacity_high": float(edges[b + 1]),
            "clients": len(members),
            "mean_test_acc": float(np.mean([m["test_acc"] for m in members]))
            if members else None,
        })
    return out


# ---------------------------------------------------------------------------
# SVG

def _polyline(points, color):
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>'


def curves_svg(series, width=640, height=420):
    """series: list of (label, [(round, acc), ...])."""
    ml, mr, mt, mb = 50, 16, 16, 40
    pw, ph = width - ml - mr, height - mt - mb
    max_round = max((pts[-1][0] for _, pts in series if pts), default=1) or 1
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = mt + ph * (1 - frac)
        parts.append(f'<line x1="{ml - 4}" y1="{y:.2f}" x2="{ml}" y2="{y:.2f}" stroke="#333"/>')
        parts.append(f'<text x="{ml - 8}" y="{y + 4:.2f}" font-size="11" '
                     f'text-anchor="end">{frac:.2f}</text>')
        x = ml + pw * frac
        parts.append(f'<line x1="{x:.2f}" y1="{mt + ph}" x2="{x:.2f}" '
                     f'y2="{mt + ph + 4}" stroke="#333"/>')
        parts.append(f'<text x="{x:.2f}" y="{mt + ph + 16}" font-size="11" '
                     f'text-anchor="middle">{int(round(frac * max_round))}</text>')
    parts.append(f'<text x="{ml + pw / 2:.2f}" y="{height - 6}" font-size="12" '
                 f'text-anchor="middle">communication round</text>')
    parts.append(f'<text x="12" y="{mt + ph / 2:.2f}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 12 {mt + ph / 2:.2f})">mean test accuracy</text>')
    for k, (label, pts) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        coords = [(ml + pw * (t / max_round), mt + ph * (1 - a)) for t, a in pts]
        if coords:
            parts.append(_polyline(coords, color))
        lx, ly = ml + 10, mt + 16 + 16 * k
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 24}" y="{ly}" font-size="12">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(run_dirs, out_dir):
    """Learning-curve SVG plus per-run capacity-cluster table."""
    if not run_dirs:
        raise ConfigurationError("report needs at least one run directory")
    os.makedirs(out_dir, exist_ok=True)
    series = []
    cluster_lines = ["run,method,cluster,capacity_low,capacity_high,clients,mean_test_acc"]
    for run_dir in run_dirs:
        label, rows = read_metrics(run_dir)
        series.append((label, mean_test_by_round(rows)))
        for c in capacity_clusters(rows):
            mean = "" if c["mean_test_acc"] is None else repr(c["mean_test_acc"])
            cluster_lines.append(
                f"{os.path.basename(os.path.normpath(run_dir))},{label},{c['cluster']},"
                f"{c['capacity_low']:.1f},{c['capacity_high']:.1f},{c['clients']},{mean}")
    svg_path = os.path.join(out_dir, "curves.svg")
    with open(svg_path, "w") as fh:
        fh.write(curves_svg(series))
    table_path = os.path.join(out_dir, "capacity_clusters.csv")
    with open(table_path, "w") as fh:
        fh.write("\n".join(cluster_lines) + "\n")
    return svg_path, table_path


# ---------------------------------------------------------------------------
# analytic cost accounting

ACCOUNT_RATIOS = (Fraction(1, 256), Fraction(1, 64), Fraction(1, 4), Fraction(1))


def account(cfg: RunConfig):
    """Analytic per-capacity cost rows for the configured model."""
    from .runner import build_arch, build_dataset

    if cfg.dataset == "synth":
        c, h, w = cfg.synth_shape
        classes = cfg.synth_classes
    else:
        ds = build_dataset(cfg)
        c, h, w = ds.features.shape[1:]
        classes = ds.classes
    from .model import CnnArch, ConvBlock

    arch = CnnArch(c, h, w,
                   convs=tuple(ConvBlock(ch, cfg.conv_kernel, 1, cfg.conv_kernel // 2, True)
                               for ch in cfg.conv_channels),
                   hidden=tuple(cfg.fc_dims), classes=classes)
    layout = build_layout(arch, cfg.min_width)
    grid = supported_widths(cfg.min_width)
    # output spatial size of each conv (pre-pool), 1 for linears
    qs = []
    hw = (h, w)
    for cb in arch.convs:
        ho = (hw[0] + 2 * cb.pad - cb.kernel) // cb.stride + 1
        wo = (hw[1] + 2 * cb.pad - cb.kernel) // cb.stride + 1
        qs.append(int(np.sqrt(ho * wo)) if ho == wo else ho)
        hw = (ho // 2, wo // 2) if cb.pool else (ho, wo)
    qs.extend([1] * len(arch.hidden))
    rows = []
    for r in ACCOUNT_RATIOS:
        p = width_for_capacity(float(r), grid)
        forward = 0
        recovery = 0
        params = 0
        per_layer_overhead = []
        for idx, (spec, coef) in enumerate(zip(layout.specs, layout.coefs)):
            in_kept = layout.kept_inputs(idx, p)
            f, ratio = flops_account(spec, coef, p, cfg.batch, qs[idx], in_kept=in_kept)
            forward += f
            recovery += coef.rank * spec.kernel ** 2 * in_kept * layout.kept_outputs(idx, p)
            params += param_count(spec, coef, p, in_kept=in_kept)
            per_layer_overhead.append(float(ratio))
        head_in = layout.head_in(p)
        forward += cfg.batch * head_in * layout.classes
        params += layout.classes * head_in + layout.classes
        rows.append({
            "capacity_r": str(r),
            "width_p": str(p),
            "forward_madds": int(forward),
            "param_count": int(params),
            "recovery_overhead": recovery / forward,
            "per_layer_overhead": per_layer_overhead,
        })
    return rows


def format_account(rows) -> str:
    header = f"{'capacity':>10} {'width':>8} {'fwd madds':>14} {'params':>12} {'rec ovh':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['capacity_r']:>10} {r['width_p']:>8} {r['forward_madds']:>14} "
                     f"{r['param_count']:>12} {r['recovery_overhead']:>10.2e}")
    return "\n".join(lines)
