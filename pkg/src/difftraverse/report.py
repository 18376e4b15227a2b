"""Report serialization: deterministic JSON, flat CSV tables and hand-written SVG plots."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .metrics import CosineMatrix

PALETTE = {"effusion": "#c2185b", "device": "#2e7d32", "marker": "#ef6c00",
           "grid": "#1565c0", "neutral": "#222222"}


class ReportError(ValueError):
    pass


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not np.isfinite(v) else v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=1, sort_keys=True) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return str(v)


def csv_text(rows: list, columns: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def write_csv(path, rows: list, columns: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(rows, columns))
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def matrix_csv_text(matrix: np.ndarray, grid) -> str:
    rows = [{"tau": g, **{str(h): matrix[i, j] for j, h in enumerate(grid)}}
            for i, g in enumerate(grid)]
    return csv_text(rows, ["tau"] + [str(g) for g in grid])


# --------------------------------------------------------------------------
# SVG


def _svg(width: int, height: int, body: list, title: str) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif">\n'
            f'<title>{escape(title)}</title>\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")


def _color(v: float) -> str:
    """Diverging blue-white-red for v in [-1, 1]."""
    if not np.isfinite(v):
        return "#bbbbbb"
    v = float(np.clip(v, -1, 1))
    if v >= 0:
        r, g, b = 255, int(255 * (1 - v)), int(255 * (1 - v))
    else:
        r, g, b = int(255 * (1 + v)), int(255 * (1 + v)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def cosine_heatmap_svg(matrix: np.ndarray, grid, title: str) -> str:
    cell, off = 44, 60
    n = len(grid)
    body = [f'<text x="{off}" y="24" font-size="14">{escape(title)}</text>']
    for i, g in enumerate(grid):
        body.append(f'<text x="{off - 8}" y="{off + i * cell + cell / 2 + 4}" font-size="11" '
                    f'text-anchor="end">t={g}</text>')
        body.append(f'<text x="{off + i * cell + cell / 2}" y="{off - 6}" font-size="11" '
                    f'text-anchor="middle">t={g}</text>')
    for i in range(n):
        for j in range(n):
            v = matrix[i, j]
            x, y = off + j * cell, off + i * cell
            label = "n/a" if not np.isfinite(v) else f"{v:.2f}"
            body.append(f'<g class="cell"><rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                        f'fill="{_color(v)}" stroke="#ffffff"/>'
                        f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" font-size="11" '
                        f'text-anchor="middle">{label}</text></g>')
    size = off + n * cell + 20
    return _svg(size, size, body, title)


def _axes(x0, y0, w, h, xlabel, ylabel, xticks, yticks, xmap, ymap):
    out = [f'<line x1="{x0}" y1="{y0 + h}" x2="{x0 + w}" y2="{y0 + h}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 + h}" stroke="black"/>',
           f'<text x="{x0 + w / 2}" y="{y0 + h + 36}" font-size="12" '
           f'text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="{x0 - 44}" y="{y0 + h / 2}" font-size="12" text-anchor="middle" '
           f'transform="rotate(-90 {x0 - 44} {y0 + h / 2})">{escape(ylabel)}</text>']
    for t in xticks:
        out.append(f'<text x="{xmap(t):.1f}" y="{y0 + h + 16}" font-size="10" '
                   f'text-anchor="middle">{t:g}</text>')
    for t in yticks:
        out.append(f'<text x="{x0 - 6}" y="{ymap(t) + 3:.1f}" font-size="10" '
                   f'text-anchor="end">{t:.3g}</text>')
    return out


def _legend(x, y, names):
    out = []
    for i, n in enumerate(names):
        out.append(f'<rect x="{x}" y="{y + 16 * i}" width="10" height="10" '
                   f'fill="{PALETTE.get(n, "#666")}"/>'
                   f'<text x="{x + 14}" y="{y + 16 * i + 9}" font-size="11">{escape(n)}</text>')
    return out


def line_chart_svg(series: dict, title: str, xlabel: str, ylabel: str) -> str:
    """``series`` maps a name to ``(xs, ys)``."""
    if not series:
        raise ReportError("no series to plot")
    W, H, x0, y0, w, h = 560, 360, 70, 40, 360, 260
    xs = np.concatenate([np.asarray(v[0], float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], float) for v in series.values()])
    xlo, xhi = float(xs.min()), float(xs.max()) or 1.0
    ylo, yhi = 0.0, float(ys.max()) if ys.max() > 0 else 1.0
    xmap = lambda v: x0 + (v - xlo) / ((xhi - xlo) or 1.0) * w  # noqa: E731
    ymap = lambda v: y0 + h - (v - ylo) / ((yhi - ylo) or 1.0) * h  # noqa: E731
    body = [f'<text x="{x0}" y="24" font-size="14">{escape(title)}</text>']
    body += _axes(x0, y0, w, h, xlabel, ylabel, sorted(set(xs.tolist())),
                  np.linspace(ylo, yhi, 5), xmap, ymap)
    for name, (sx, sy) in series.items():
        pts = " ".join(f"{xmap(a):.1f},{ymap(b):.1f}" for a, b in zip(sx, sy))
        col = PALETTE.get(name, "#666")
        body.append(f'<polyline class="series" points="{pts}" fill="none" stroke="{col}" '
                    f'stroke-width="2"/>')
        body += [f'<circle cx="{xmap(a):.1f}" cy="{ymap(b):.1f}" r="3" fill="{col}"/>'
                 for a, b in zip(sx, sy)]
    body += _legend(x0 + w + 20, y0, list(series))
    return _svg(W, H, body, title)


def pca_scatter_svg(paths: list, title: str) -> str:
    """``paths`` is a list of ``(style_name, coords (n, 2))``; each is drawn as a polyline
    whose first point (the neutral start) is marked in black."""
    if not paths:
        raise ReportError("no trajectories to plot")
    W, H, x0, y0, w, h = 560, 420, 60, 40, 380, 330
    allc = np.concatenate([c for _, c in paths])
    lo, hi = allc.min(axis=0), allc.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xmap = lambda v: x0 + (v - lo[0]) / span[0] * w  # noqa: E731
    ymap = lambda v: y0 + h - (v - lo[1]) / span[1] * h  # noqa: E731
    body = [f'<text x="{x0}" y="24" font-size="14">{escape(title)}</text>',
            f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#999"/>',
            f'<text x="{x0 + w / 2}" y="{y0 + h + 24}" font-size="12" text-anchor="middle">PC1</text>',
            f'<text x="{x0 - 20}" y="{y0 + h / 2}" font-size="12" text-anchor="middle" '
            f'transform="rotate(-90 {x0 - 20} {y0 + h / 2})">PC2</text>']
    for name, c in paths:
        col = PALETTE.get(name, "#666")
        pts = " ".join(f"{xmap(a):.1f},{ymap(b):.1f}" for a, b in c)
        body.append(f'<polyline class="trajectory" points="{pts}" fill="none" stroke="{col}" '
                    f'stroke-width="1.5"/>')
        body += [f'<circle cx="{xmap(a):.1f}" cy="{ymap(b):.1f}" r="2.5" fill="{col}"/>'
                 for a, b in c[1:]]
        body.append(f'<circle cx="{xmap(c[0, 0]):.1f}" cy="{ymap(c[0, 1]):.1f}" r="4" '
                    f'fill="{PALETTE["neutral"]}"/>')
    names = list(dict.fromkeys(n for n, _ in paths))
    body += _legend(x0 + w + 16, y0, names + ["neutral"])
    return _svg(W, H, body, title)


# --------------------------------------------------------------------------
# report bundles


@dataclass
class CosineReport:
    name: str
    cosine: CosineMatrix


@dataclass
class DistanceReport:
    """Mean feature perceptual distance per swap timestep, one series per style."""

    name: str
    series: dict  # style -> (positions, values)


@dataclass
class PcaReport:
    name: str
    paths: list  # [(style, seed, coords (n, 2))]


def _validate(rep) -> None:
    if isinstance(rep, CosineReport):
        m = rep.cosine.matrix
        if m.shape != (len(rep.cosine.grid),) * 2:
            raise ReportError(f"{rep.name}: cosine matrix shape {m.shape} does not match its grid")
    elif isinstance(rep, DistanceReport):
        if not rep.series:
            raise ReportError(f"{rep.name}: no series")
        for k, (xs, ys) in rep.series.items():
            if len(xs) != len(ys) or len(xs) == 0:
                raise ReportError(f"{rep.name}: series {k!r} is empty or ragged")
    elif isinstance(rep, PcaReport):
        if not rep.paths or any(np.shape(c)[1:] != (2,) for _, _, c in rep.paths):
            raise ReportError(f"{rep.name}: PCA paths must be non-empty (n, 2) arrays")
    else:
        raise ReportError(f"unsupported report type {type(rep).__name__}")
    if not rep.name or "/" in rep.name:
        raise ReportError(f"invalid report name {rep.name!r}")


def emit_report(reports: list, out_dir) -> list[Path]:
    """Write a CSV table and a standalone SVG for every report; returns the paths written.

    All reports are validated before the first file is written.
    """
    if not reports:
        raise ReportError("empty report list")
    for rep in reports:
        _validate(rep)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rep in reports:
        if isinstance(rep, CosineReport):
            c = rep.cosine
            csv_body = matrix_csv_text(c.matrix, c.grid)
            svg = cosine_heatmap_svg(c.matrix, c.grid, f"cosine similarity: {rep.name}")
        elif isinstance(rep, DistanceReport):
            rows = [{"series": k, "position": x, "value": y}
                    for k, (xs, ys) in rep.series.items() for x, y in zip(xs, ys)]
            csv_body = csv_text(rows, ["series", "position", "value"])
            svg = line_chart_svg(rep.series, f"feature perceptual distance: {rep.name}",
                                 "swap timestep tau", "distance to neutral")
        else:
            rows = [{"style": s, "seed": seed, "point": i, "pc1": xy[0], "pc2": xy[1]}
                    for s, seed, c in rep.paths for i, xy in enumerate(c)]
            csv_body = csv_text(rows, ["style", "seed", "point", "pc1", "pc2"])
            svg = pca_scatter_svg([(s, np.asarray(c)) for s, _, c in rep.paths],
                                  f"PCA of trajectory latents: {rep.name}")
        for suffix, body in ((".csv", csv_body), (".svg", svg)):
            p = out / f"{rep.name}{suffix}"
            p.write_text(body)
            written.append(p)
    return written
