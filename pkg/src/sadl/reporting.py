"""Artifact writers: CSV tables, the binary path cache, SVG plots, and the run manifest.

CSV files are UTF-8 with a header row, '.' decimal separator, LF endings, and
no timestamps, so identical runs produce byte-identical bodies.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

CACHE_MAGIC = b"SADL1"


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) if not isinstance(v, str) else v for v in row) + "\n")


def write_paths_csv(path, grid_t, array) -> None:
    """Path table with columns path_id, k, t, x_1..x_d for an [n_paths, M+1, d] array."""
    n_paths, n_times, d = array.shape
    header = ["path_id", "k", "t"] + [f"x_{i + 1}" for i in range(d)]

    def rows():
        for p in range(n_paths):
            for k in range(n_times):
                yield [p, k, grid_t[k]] + list(array[p, k])

    write_csv(path, header, rows())


def write_binary_cache(path, array) -> None:
    """Columnar cache: magic 'SADL1', three little-endian u32 dims, then f64 data.

    Layout: n_paths, n_times, dim, followed by the array row-major
    [path, time, component] as little-endian float64.
    """
    array = np.ascontiguousarray(array, dtype="<f8")
    if array.ndim != 3:
        raise ValueError("cache expects an [n_paths, n_times, d] array")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<III", *array.shape))
        fh.write(array.tobytes())


def read_binary_cache(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != CACHE_MAGIC:
            raise ValueError(f"bad cache magic {magic!r}")
        shape = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(shape)


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class Manifest:
    """Collects every artifact a run writes, with its producing stage and config hash."""

    def __init__(self, out_dir, cfg_hash: str):
        self.out_dir = Path(out_dir)
        self.cfg_hash = cfg_hash
        self.entries = []

    def add(self, path, stage: str) -> Path:
        path = Path(path)
        self.entries.append({"file": path.name, "stage": stage, "config": self.cfg_hash})
        return path

    def write(self) -> Path:
        path = self.out_dir / "manifest.json"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump({"config": self.cfg_hash, "artifacts": self.entries}, fh, indent=1,
                      sort_keys=True)
            fh.write("\n")
        return path


def svg_plot(path, series: dict, xlabel: str, ylabel: str, title: str = "",
             loglog: bool = False, width: int = 640, height: int = 480) -> None:
    """Minimal SVG polyline plot; series maps label -> (xs, ys).

    No external renderer: axes, ticks, polylines, and a small legend only.
    """
    margin = 60
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

    def transform(vals):
        vals = np.asarray(vals, dtype=float)
        if loglog:
            if np.any(vals <= 0):
                raise ValueError("log axes need positive data")
            return np.log10(vals)
        return vals

    all_x = np.concatenate([transform(xs) for xs, _ in series.values()])
    all_y = np.concatenate([transform(ys) for _, ys in series.values()])
    x_lo, x_hi = float(all_x.min()), float(all_x.max())
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def px(v):
        return margin + (v - x_lo) / x_span * (width - 2 * margin)

    def py(v):
        return height - margin - (v - y_lo) / y_span * (height - 2 * margin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>']
    parts.append(f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
                 f'y2="{height - margin}" stroke="black"/>')
    parts.append(f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
                 f'y2="{height - margin}" stroke="black"/>')
    for frac in (0.0, 0.5, 1.0):
        xv = x_lo + frac * x_span
        yv = y_lo + frac * y_span
        label_x = f"{10 ** xv:.3g}" if loglog else f"{xv:.3g}"
        label_y = f"{10 ** yv:.3g}" if loglog else f"{yv:.3g}"
        parts.append(f'<text x="{px(xv):.1f}" y="{height - margin + 18:.1f}" '
                     f'text-anchor="middle" font-size="11">{label_x}</text>')
        parts.append(f'<text x="{margin - 8:.1f}" y="{py(yv) + 4:.1f}" '
                     f'text-anchor="end" font-size="11">{label_y}</text>')
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" '
                 f'font-size="12">{xlabel}</text>')
    parts.append(f'<text x="16" y="{height / 2:.0f}" text-anchor="middle" font-size="12" '
                 f'transform="rotate(-90 16 {height / 2:.0f})">{ylabel}</text>')
    for ci, (label, (xs, ys)) in enumerate(series.items()):
        tx, ty = transform(xs), transform(ys)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(tx, ty))
        color = colors[ci % len(colors)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for a, b in zip(tx, ty):
            parts.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{width - margin + 4}" y="{margin + 16 * ci + 10}" '
                     f'font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
