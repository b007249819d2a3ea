"""Stage reports (schema-checked JSON) and heat-map rendering for matrices."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .io import write_pgm

FORMAT_VERSION = 1


def schema() -> dict:
    return json.loads(resources.files("klp").joinpath("schemas/report.schema.json").read_text())


def _plain(x):
    """Convert numpy scalars/arrays inside ``x`` to JSON-native values."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def write_report(directory, stage: str, seed: int, metrics: dict, artifacts: Sequence[str]) -> dict:
    """Validate and write ``report.json``; no timings, so reruns are byte-identical."""
    doc = _plain({"format_version": FORMAT_VERSION, "stage": stage, "seed": int(seed),
                  "metrics": metrics, "artifacts": sorted(set(artifacts))})
    jsonschema.validate(doc, schema())
    path = Path(directory) / "report.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return doc


def heatmap_pgm(path, matrix: np.ndarray, cell: int = 40, vmax=None) -> None:
    """Grayscale heat map, one ``cell`` x ``cell`` block per entry; darker is larger."""
    m = np.asarray(matrix, dtype=np.float64)
    top = float(m.max()) if vmax is None else float(vmax)
    level = np.zeros_like(m) if top <= 0 else np.clip(m / top, 0, 1)
    img = np.kron(np.round(255 * (1 - level)), np.ones((cell, cell))).astype(np.uint8)
    write_pgm(path, img)


def heatmap_svg(path, matrix: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str],
                title: str = "", cell: int = 48, fmt: str = "{:.2f}", vmax=None) -> None:
    m = np.asarray(matrix, dtype=np.float64)
    top = float(m.max()) if vmax is None else float(vmax)
    pad, n_r, n_c = 90, m.shape[0], m.shape[1]
    w, h = pad + n_c * cell + 10, pad + n_r * cell + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">']
    if title:
        out.append(f'<text x="{w / 2:.0f}" y="18" text-anchor="middle">{title}</text>')
    for j, lab in enumerate(col_labels):
        out.append(f'<text x="{pad + (j + 0.5) * cell:.0f}" y="{pad - 8}" text-anchor="middle">{lab}</text>')
    for i, lab in enumerate(row_labels):
        out.append(f'<text x="{pad - 8}" y="{pad + (i + 0.5) * cell + 4:.0f}" text-anchor="end">{lab}</text>')
        for j in range(n_c):
            v = m[i, j]
            level = 0.0 if top <= 0 else min(max(v / top, 0.0), 1.0)
            g = int(round(255 * (1 - 0.8 * level)))
            ink = "#fff" if level > 0.6 else "#000"
            x, y = pad + j * cell, pad + i * cell
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({g},{g},255)" stroke="#888"/>')
            out.append(f'<text x="{x + cell / 2:.0f}" y="{y + cell / 2 + 4:.0f}" text-anchor="middle" fill="{ink}">{fmt.format(v)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
