"""Config loading, result files and a tiny SVG line-chart writer.

Every table is written as a CSV with a header row plus a ``.meta.json``
sidecar.  Nothing time-dependent goes into either file, so re-running a
stored config reproduces its outputs byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import sys
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

TOOL_VERSION = "0.1.0"


def load_config(path: str | Path | None) -> dict:
    """Read a TOML (preferred) or JSON config; ``None`` gives ``{}``."""
    if path is None:
        return {}
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(raw.decode("utf-8"))
    return tomllib.loads(raw.decode("utf-8"))


def _plain(obj: Any) -> Any:
    # numpy scalars/arrays and tuples into JSON-native values
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def dumps(obj: Any) -> str:
    """Canonical JSON: sorted keys, fixed separators, trailing newline."""
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def config_hash(config: Mapping) -> str:
    blob = json.dumps(_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_json(path: str | Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8", newline="\n")
    return path


def _fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def csv_text(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(columns))
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_table(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence[Any]],
                config: Mapping, seed: int, extra: Mapping | None = None) -> Path:
    """Write ``path`` (CSV) and ``path.meta.json`` next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(columns, rows), encoding="utf-8", newline="\n")
    meta = {
        "file": path.name,
        "columns": list(columns),
        "config_hash": config_hash(config),
        "seed": int(seed),
        "tool_version": TOOL_VERSION,
    }
    if extra:
        meta["extra"] = dict(extra)
    write_json(path.with_name(path.name + ".meta.json"), meta)
    return path


def read_table(path: str | Path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


# --- SVG -------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
            "#e377c2", "#7f7f7f")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    t = start
    while t <= hi + 1e-12 * step:
        out.append(round(t, 12))
        t += step
    return out


def svg_line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
                   title: str = "", xlabel: str = "", ylabel: str = "",
                   bands: Mapping[str, tuple[Sequence[float], Sequence[float], Sequence[float]]] | None = None,
                   width: int = 640, height: int = 400) -> str:
    """Render named (x, y) series as a standalone SVG document.

    ``bands`` maps a series name to (x, lower, upper) and is drawn as a
    translucent filled region under the line of the same colour.
    """
    bands = bands or {}
    xs = [float(v) for s in series.values() for v in s[0]]
    ys = [float(v) for s in series.values() for v in s[1] if np.isfinite(v)]
    for b in bands.values():
        ys += [float(v) for v in b[1] if np.isfinite(v)] + [float(v) for v in b[2] if np.isfinite(v)]
    if not xs or not ys:
        raise ValueError("nothing to plot")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    pad = 0.05 * (y1 - y0 or 1.0)
    y0, y1 = y0 - pad, y1 + pad
    ml, mr, mt, mb = 60, 150, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.2f}" y1="{mt + ph}" x2="{px(t):.2f}" y2="{mt + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{px(t):.2f}" y="{mt + ph + 16}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{ml - 4}" y1="{py(t):.2f}" x2="{ml}" y2="{py(t):.2f}" stroke="#444"/>')
        out.append(f'<text x="{ml - 6}" y="{py(t) + 4:.2f}" text-anchor="end">{t:g}</text>')
    if title:
        out.append(f'<text x="{ml + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>')
    if xlabel:
        out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{_esc(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for i, (name, (sx, sy)) in enumerate(series.items()):
        col = _PALETTE[i % len(_PALETTE)]
        if name in bands:
            bx, lo, hi = bands[name]
            pts = [(px(float(a)), py(float(b))) for a, b in zip(bx, hi)]
            pts += [(px(float(a)), py(float(b))) for a, b in reversed(list(zip(bx, lo)))]
            out.append('<polygon fill="%s" fill-opacity="0.2" stroke="none" points="%s"/>'
                       % (col, " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)))
        pts = [(px(float(a)), py(float(b))) for a, b in zip(sx, sy) if np.isfinite(b)]
        out.append('<polyline fill="none" stroke="%s" stroke-width="1.8" points="%s"/>'
                   % (col, " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)))
        for a, b in pts:
            out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.5" fill="{col}"/>')
        ly = mt + 14 + 16 * i
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 28}" y2="{ly - 4}" '
                   f'stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 32}" y="{ly}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_svg(path: str | Path, svg: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8", newline="\n")
    return path
