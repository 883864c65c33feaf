"""CSV and SVG experiment reports."""

from __future__ import annotations

import csv
import io
from datetime import datetime, timezone
from pathlib import Path
from xml.sax.saxutils import escape

from .model import BOTTLENECKS, Bottleneck

CSV_COLUMNS = (
    "concept",
    "class",
    "bottleneck",
    "mean_score",
    "p_raw",
    "p_corrected",
    "significant",
    "direction",
    "n_runs",
    "test",
)


def _row(r) -> dict:
    return {
        "concept": r.concept_id,
        "class": r.target_class,
        "bottleneck": Bottleneck.parse(r.bottleneck).value,
        "mean_score": f"{r.mean_score:.6f}",
        "p_raw": f"{r.p_raw:.6g}",
        "p_corrected": f"{r.p_corrected:.6g}",
        "significant": "true" if r.significant else "false",
        "direction": r.direction,
        "n_runs": r.n_runs,
        "test": r.test,
    }


def results_to_csv(results) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow(_row(r))
    return buf.getvalue()


def write_csv(path, results) -> None:
    Path(path).write_text(results_to_csv(results), encoding="utf-8")


def read_csv(path) -> list:
    """Rows as dicts with numeric fields converted."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            row["class"] = int(row["class"])
            for key in ("mean_score", "p_raw", "p_corrected"):
                row[key] = float(row[key])
            row["significant"] = row["significant"] == "true"
            row["n_runs"] = int(row["n_runs"])
            rows.append(row)
    return rows


# chart geometry
_W, _H = 720, 360
_LEFT, _RIGHT, _TOP, _BOTTOM = 60, 180, 40, 60
_PALETTE = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb")


def results_to_svg(results, title: str = "TCAV scores", timestamp=True) -> str:
    """Grouped bars (one group per bottleneck, one bar per concept).

    ``results`` holds TcavResult objects or rows from :func:`read_csv`.
    Significant bars get a star; the dashed line marks 0.5. ``timestamp``
    may be True (now, UTC), False, or a fixed string.
    """
    rows = [r if isinstance(r, dict) else _row(r) for r in results]
    order = [b.value for b in BOTTLENECKS]
    groups = [b for b in order if any(r["bottleneck"] == b for r in rows)]
    concepts = list(dict.fromkeys(r["concept"] for r in rows))
    plot_w = _W - _LEFT - _RIGHT
    plot_h = _H - _TOP - _BOTTOM

    def y(v):
        return _TOP + plot_h * (1.0 - v)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
        f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{_LEFT}" y1="{_TOP}" x2="{_LEFT}" y2="{_TOP + plot_h}" stroke="black"/>',
        f'<line x1="{_LEFT}" y1="{_TOP + plot_h}" x2="{_LEFT + plot_w}" y2="{_TOP + plot_h}" stroke="black"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(
            f'<text x="{_LEFT - 6}" y="{y(tick) + 4:.1f}" text-anchor="end">{tick:.2f}</text>'
        )
    out.append(
        f'<line class="chance" x1="{_LEFT}" y1="{y(0.5):.1f}" x2="{_LEFT + plot_w}" y2="{y(0.5):.1f}" '
        'stroke="gray" stroke-dasharray="4,3"/>'
    )

    if groups and concepts:
        group_w = plot_w / len(groups)
        bar_w = group_w * 0.8 / len(concepts)
        for gi, g in enumerate(groups):
            x0 = _LEFT + gi * group_w + group_w * 0.1
            out.append(
                f'<text x="{_LEFT + (gi + 0.5) * group_w:.1f}" y="{_TOP + plot_h + 18}" '
                f'text-anchor="middle">{escape(g)}</text>'
            )
            for ci, c in enumerate(concepts):
                match = [r for r in rows if r["bottleneck"] == g and r["concept"] == c]
                if not match:
                    continue
                r = match[0]
                v = float(r["mean_score"])
                x = x0 + ci * bar_w
                out.append(
                    f'<rect class="bar" x="{x:.1f}" y="{y(v):.1f}" width="{bar_w * 0.9:.1f}" '
                    f'height="{plot_h * v:.1f}" fill="{_PALETTE[ci % len(_PALETTE)]}">'
                    f"<title>{escape(c)} @ {escape(g)}: {v:.3f} (p={r['p_corrected']})</title></rect>"
                )
                if r["significant"] in (True, "true"):
                    sign = "positive" if v > 0.5 else "negative"
                    out.append(
                        f'<text class="star {sign}" x="{x + bar_w * 0.45:.1f}" y="{y(v) - 4:.1f}" '
                        f'text-anchor="middle" font-size="14">*</text>'
                    )
        for ci, c in enumerate(concepts):
            ly = _TOP + 14 * ci
            lx = _W - _RIGHT + 16
            out.append(
                f'<rect x="{lx}" y="{ly}" width="10" height="10" fill="{_PALETTE[ci % len(_PALETTE)]}"/>'
            )
            out.append(f'<text x="{lx + 14}" y="{ly + 9}">{escape(c)}</text>')

    if timestamp:
        stamp = timestamp if isinstance(timestamp, str) else datetime.now(timezone.utc).isoformat(timespec="seconds")
        out.append(f'<text class="timestamp" x="{_W - 6}" y="{_H - 6}" text-anchor="end" font-size="9">{escape(stamp)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, results, title: str = "TCAV scores", timestamp=True) -> None:
    Path(path).write_text(results_to_svg(results, title, timestamp), encoding="utf-8")
