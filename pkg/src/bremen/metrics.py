"""JSONL metrics stream and dependency-free SVG line charts."""
from __future__ import annotations

import json
import math
from pathlib import Path


class MetricsWriter:
    """Append-only JSONL writer; one row per call, flushed on deployment summaries."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")
        self._last = None

    def __call__(self, row: dict) -> None:
        key = (row["run_id"], row["deployment"], row["iteration"])
        if self._last is not None and key[0] == self._last[0] and key[1:] <= self._last[1:]:
            raise ValueError(f"metrics rows out of order: {self._last} then {key}")
        self._last = key
        self._fh.write(encode_row(row) + "\n")
        if row["iteration"] == 0 or "eval_return" in row["scalars"]:
            self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def encode_row(row: dict) -> str:
    return json.dumps(_clean(row), sort_keys=True, separators=(",", ":"))


def emit_metrics(path, row: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(encode_row(row) + "\n")


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                # a torn final line from an interrupted run is skipped
                continue
    return rows


def scalar_names(rows) -> list[str]:
    names = set()
    for r in rows:
        names.update(k for k, v in r["scalars"].items() if isinstance(v, (int, float)) and v is not None)
    return sorted(names)


def _series(rows, name):
    # x = position in the stream (deployments and iterations interleaved)
    pts, ticks = [], []
    seen = set()
    for i, r in enumerate(rows):
        d = r["deployment"]
        if d >= 1 and (r["run_id"], d) not in seen:
            seen.add((r["run_id"], d))
            ticks.append(i)
        v = r["scalars"].get(name)
        if isinstance(v, (int, float)) and v is not None and math.isfinite(v):
            pts.append((i, float(v)))
    return pts, ticks


def render_svg(rows, name: str, width: int = 640, height: int = 360) -> str:
    pts, ticks = _series(rows, name)
    pad = 40
    n = max(len(rows) - 1, 1)
    ys = [p[1] for p in pts] or [0.0]
    lo, hi = min(ys), max(ys)
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0

    def sx(x):
        return pad + (width - 2 * pad) * x / n

    def sy(y):
        return height - pad - (height - 2 * pad) * (y - lo) / (hi - lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="{pad}" y="20" font-size="14">{name}</text>',
           f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
           'fill="none" stroke="#888"/>']
    for t in ticks:
        x = f"{sx(t):.2f}"
        out.append(f'<line class="deployment-tick" x1="{x}" y1="{pad}" x2="{x}" y2="{height - pad}" '
                   'stroke="#999" stroke-dasharray="2,3"/>')
    if pts:
        d = " ".join(f"{'M' if j == 0 else 'L'}{sx(x):.2f},{sy(y):.2f}" for j, (x, y) in enumerate(pts))
        out.append(f'<path class="series" d="{d}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>')
    out.append(f'<text x="4" y="{pad}" font-size="10">{hi:.4g}</text>')
    out.append(f'<text x="4" y="{height - pad}" font-size="10">{lo:.4g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(metrics_path, name: str, out_path) -> Path:
    rows = read_metrics(metrics_path)
    out_path = Path(out_path)
    out_path.write_text(render_svg(rows, name), encoding="utf-8")
    return out_path


def emit_all_plots(metrics_path, out_dir) -> list[Path]:
    rows = read_metrics(metrics_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in scalar_names(rows):
        p = out_dir / f"{name}.svg"
        p.write_text(render_svg(rows, name), encoding="utf-8")
        paths.append(p)
    return paths
