"""Report emission: CSV tables, JSON run metadata and small SVG line charts.

CSV bodies are deterministic: fixed column order and floats written with
``repr``. Unless ``reproducible`` is set, a ``# generated: <timestamp>`` line
precedes the header; it is the only part of a file that varies between runs.
"""

import csv
import datetime
import json
import math
import os
from xml.sax.saxutils import escape

import numpy as np


def _cell(value):
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return repr(v) if math.isfinite(v) else ('nan' if v != v else ('inf' if v > 0 else '-inf'))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path, columns, rows, reproducible=False):
    """Write ``rows`` (mappings or sequences) under ``columns``; returns ``path``."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        if not reproducible:
            stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds')
            fh.write(f'# generated: {stamp}\n')
        w = csv.writer(fh, lineterminator='\n')
        w.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(c) for c in columns]
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path):
    """Rows of a CSV written by :func:`write_csv` as dicts of strings."""
    with open(path, newline='', encoding='utf-8') as fh:
        lines = [ln for ln in fh if not ln.startswith('# generated:')]
    return list(csv.DictReader(lines))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write('\n')
    return path


# SVG ------------------------------------------------------------------------

_PALETTE = ('#1f77b4', '#d62728', '#2ca02c', '#9467bd')


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def line_chart_svg(series, xlabel, ylabel, title='', width=480, height=320):
    """Minimal line chart. ``series`` maps a label to ``(x, y)`` arrays.

    Non-finite points are dropped.
    """
    left, right, top, bottom = 60, 20, 30, 50
    pts = {}
    for label, (x, y) in series.items():
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        pts[label] = (x[ok], y[ok])
    xs = np.concatenate([p[0] for p in pts.values()] or [np.zeros(1)])
    ys = np.concatenate([p[1] for p in pts.values()] or [np.zeros(1)])
    if xs.size == 0:
        xs, ys = np.zeros(1), np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pw, ph = width - left - right, height - top - bottom

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{sx(t):.2f}" y="{top + ph + 15}" text-anchor="middle">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{left - 5}" y="{sy(t) + 4:.2f}" text-anchor="end">{t:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 12}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{top + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {top + ph / 2:.2f})">{escape(ylabel)}</text>')
    if title:
        out.append(f'<text x="{width / 2:.2f}" y="18" text-anchor="middle">{escape(title)}</text>')
    for k, (label, (x, y)) in enumerate(pts.items()):
        color = _PALETTE[k % len(_PALETTE)]
        order = np.argsort(x, kind='stable')
        path = ' '.join(f'{sx(a):.2f},{sy(b):.2f}' for a, b in zip(x[order], y[order]))
        if path:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                       f'points="{path}"/>')
        out.append(f'<text x="{left + pw - 5}" y="{top + 12 + 14 * k}" text-anchor="end" '
                   f'fill="{color}">{escape(str(label))}</text>')
    out.append('</svg>')
    return '\n'.join(out) + '\n'


def write_svg(path, series, xlabel, ylabel, title=''):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        fh.write(line_chart_svg(series, xlabel, ylabel, title))
    return path
