"""Report artifacts: results CSV, markdown tables, SVG figures.

Everything here is emitted with fixed formatting so identical inputs
produce byte-identical files (the SVG writers are hand-rolled for that
reason). Accuracies are written as percentages: full float precision in
the CSV (so it re-parses exactly), two decimals in the markdown tables.
"""

from __future__ import annotations

import csv
import logging

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

RESULT_FIELDS = ("run", "arch", "variant", "balanced", "best_iteration",
                 "scope", "at1", "at5", "nat1", "n_test")


def write_results_csv(path, rows: list[dict]) -> None:
    """rows carry percentage-scale at1/at5/nat1; floats keep full precision."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            out = dict(row)
            for k in ("at1", "at5", "nat1"):
                out[k] = repr(float(row[k]))
            w.writerow(out)


def read_results_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != RESULT_FIELDS:
            raise ValidationError(f"{path}: unexpected results columns {reader.fieldnames}")
        for raw in reader:
            rows.append({
                "run": raw["run"],
                "arch": raw["arch"],
                "variant": raw["variant"],
                "balanced": raw["balanced"] == "True",
                "best_iteration": int(raw["best_iteration"]),
                "scope": raw["scope"],
                "at1": float(raw["at1"]),
                "at5": float(raw["at5"]),
                "nat1": float(raw["nat1"]),
                "n_test": int(raw["n_test"]),
            })
    return rows


def write_ranking_csv(path, ranking: list[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rank", "run", "total_at1_at5"])
        for i, (run, total) in enumerate(ranking, start=1):
            w.writerow([i, run, repr(float(total))])


def results_markdown(rows: list[dict], ranking: list[tuple] | None = None,
                     durations: dict | None = None) -> str:
    """Experiment table in the papers' layout: metric rows, run x scope columns."""
    runs = []
    for row in rows:
        if row["run"] not in runs:
            runs.append(row["run"])
    by_key = {(r["run"], r["scope"]): r for r in rows}
    scopes = ("A,B", "B")
    lines = ["# Results", "", "## Dish recognition", ""]
    header = ["Experiment"]
    sub = ["Datasets"]
    for run in runs:
        header += [str(run), ""]
        sub += list(scopes)
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    lines.append("| " + " | ".join(sub) + " |")
    for metric in ("at1", "at5", "nat1"):
        row = [metric.upper()]
        for run in runs:
            for scope in scopes:
                cell = by_key.get((run, scope))
                row.append("%.2f" % cell[metric] if cell else "-")
        lines.append("| " + " | ".join(row) + " |")
    if ranking:
        lines += ["", "## Ranking (sum of AT1 + AT5 over both scopes)", ""]
        for i, (run, total) in enumerate(ranking, start=1):
            lines.append(f"{i}. experiment {run}: {total:.2f}")
    if durations:
        lines += ["", "## Durations", ""]
        for run, secs in durations.items():
            lines.append(f"- run {run}: {secs:.1f}s")
    return "\n".join(lines) + "\n"


def category_markdown(rows: list[dict]) -> str:
    """Fine-tune comparison table: one row per freeze mode."""
    lines = ["## Category recognition", "",
             "| Mode | AT1 | AT5 | NAT1 | # Iterations | Best iteration |",
             "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append("| %s | %.2f | %.2f | %.2f | %d | %d |" % (
            r["mode"], r["at1"], r["at5"], r["nat1"],
            r["max_iterations"], r["best_iteration"]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# SVG

def _heat_color(v: float) -> str:
    # white -> dark blue
    v = min(max(float(v), 0.0), 1.0)
    r = int(round(255 - 224 * v))
    g = int(round(255 - 180 * v))
    b = int(round(255 - 80 * v))
    return f"#{r:02x}{g:02x}{b:02x}"


def cm_heatmap_svg(cm: np.ndarray, title: str = "") -> str:
    """Row-normalized confusion matrix as a colored grid."""
    n = cm.shape[0]
    cell = max(6, min(40, 480 // max(n, 1)))
    pad = 40
    size = n * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * pad}" '
        f'height="{size + 2 * pad}" viewBox="0 0 {size + 2 * pad} {size + 2 * pad}">',
        f'<text x="{pad}" y="20" font-family="monospace" font-size="12">{title}</text>',
    ]
    for i in range(n):
        for j in range(n):
            x = pad + j * cell
            y = pad + i * cell
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{_heat_color(cm[i, j])}" stroke="#cccccc" stroke-width="0.5"/>'
            )
    parts.append(f'<text x="{pad}" y="{size + pad + 16}" font-family="monospace" '
                 f'font-size="10">rows: true class, columns: predicted (row-normalized)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def dims_scatter_svg(dims: list[tuple[int, int]], title: str = "") -> str:
    """Width/height scatter of image dimensions."""
    w_px, h_px, pad = 480, 480, 50
    top = max([max(w, h) for w, h in dims], default=1)
    top = max(top, 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w_px + 2 * pad}" '
        f'height="{h_px + 2 * pad}" viewBox="0 0 {w_px + 2 * pad} {h_px + 2 * pad}">',
        f'<text x="{pad}" y="24" font-family="monospace" font-size="12">{title}</text>',
        f'<rect x="{pad}" y="{pad}" width="{w_px}" height="{h_px}" fill="none" stroke="#333333"/>',
    ]
    for w, h in dims:
        x = pad + (w / top) * w_px
        y = pad + h_px - (h / top) * h_px
        parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="2.5" fill="#1f4e79" fill-opacity="0.5"/>')
    parts.append(f'<text x="{pad}" y="{h_px + pad + 28}" font-family="monospace" font-size="10">'
                 f'width (max {top}) vs height</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_cm_heatmap(path, cm: np.ndarray, title: str = "") -> bool:
    if cm.size == 0:
        log.warning("empty confusion matrix: skipping heatmap %s", path)
        return False
    with open(path, "w", encoding="utf-8") as f:
        f.write(cm_heatmap_svg(cm, title))
    return True


def write_dims_scatter(path, dims, title: str = "") -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dims_scatter_svg(dims, title))


def stats_csv(stats) -> str:
    """Category/dish statistics table as CSV text."""
    lines = ["category,dishes,pct_dishes,images"]
    for cat, nd, pct, ni in stats.per_category:
        lines.append(f"{cat},{nd},{pct:.2f},{ni}")
    lines.append(f"total,{stats.total_dishes},100.00,{stats.total_images}")
    return "\n".join(lines) + "\n"
