"""Files written and read by the command-line driver.

Floats are written with Python's shortest round-trip ``repr``, so every CSV
parses back to exactly the doubles that were written.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import RecordError
from .filters import ObservationRecord
from .master import TimeGrid
from .operators import Detection

EXPECTATIONS_HEADER = "t,obs_name,mean,stderr,master"


def fmt(x) -> str:
    """Shortest string that parses back to the same double."""
    return repr(float(x))


# --- observation records ----------------------------------------------------

def format_record(record: ObservationRecord) -> str:
    g = record.grid
    col = "dy" if record.detection is Detection.HOMODYNE else "dN"
    lines = [
        f"# detection = {record.detection.value}",
        f"# t0 = {fmt(g.t0)}",
        f"# dt = {fmt(g.dt)}",
        f"# n_steps = {g.n_steps}",
        f"# master_seed = {'none' if record.master_seed is None else record.master_seed}",
        f"# traj_index = {'none' if record.traj_index is None else record.traj_index}",
        f"k,{col}",
    ]
    if record.detection is Detection.HOMODYNE:
        lines += [f"{k},{fmt(v)}" for k, v in enumerate(record.increments)]
    else:
        lines += [f"{k},{int(v)}" for k, v in enumerate(record.increments)]
    return "\n".join(lines) + "\n"


def parse_record(text: str, source: str = "record") -> ObservationRecord:
    """Inverse of :func:`format_record`; raises :class:`RecordError` with specifics."""
    header: dict[str, str] = {}
    rows: list[str] = []
    col = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, val = line[1:].partition("=")
            if not sep:
                raise RecordError(f"{source}:{lineno}: header line must be '# key = value'")
            header[key.strip()] = val.strip()
        elif col is None:
            col = line
        else:
            rows.append((lineno, line))
    missing = [k for k in ("detection", "t0", "dt", "n_steps") if k not in header]
    if missing:
        raise RecordError(f"{source}: missing header field(s): {', '.join(missing)}")
    try:
        detection = Detection(header["detection"])
    except ValueError:
        raise RecordError(f"{source}: unknown detection {header['detection']!r}") from None
    expected_col = "k,dy" if detection is Detection.HOMODYNE else "k,dN"
    if col != expected_col:
        raise RecordError(f"{source}: expected column header {expected_col!r}, found {col!r}")
    try:
        grid = TimeGrid(float(header["t0"]), float(header["dt"]), int(header["n_steps"]))
    except ValueError as exc:
        raise RecordError(f"{source}: bad grid header: {exc}") from None

    def opt_int(key):
        v = header.get(key, "none")
        try:
            return None if v == "none" else int(v)
        except ValueError:
            raise RecordError(f"{source}: {key} must be an integer or 'none' (got {v!r})") from None

    values = np.empty(len(rows))
    for pos, (lineno, line) in enumerate(rows):
        parts = line.split(",")
        if len(parts) != 2:
            raise RecordError(f"{source}:{lineno}: expected 2 columns, found {len(parts)}")
        try:
            k, v = int(parts[0]), float(parts[1])
        except ValueError:
            raise RecordError(f"{source}:{lineno}: cannot parse {line!r}") from None
        if k != pos:
            raise RecordError(f"{source}:{lineno}: expected step index {pos}, found {k}")
        values[pos] = v
    return ObservationRecord(grid, detection, values, opt_int("master_seed"), opt_int("traj_index"))


def write_record(path, record: ObservationRecord) -> None:
    Path(path).write_text(format_record(record), encoding="utf-8")


def read_record(path) -> ObservationRecord:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise RecordError(f"cannot read {path}: {exc.strerror}") from None
    return parse_record(text, str(path))


def check_record_matches(record: ObservationRecord, grid: TimeGrid, detection: Detection):
    """Raise :class:`RecordError` naming each field where a record and a config disagree."""
    problems = []
    if record.detection is not detection:
        problems.append(f"detection: record {record.detection.value}, config {detection.value}")
    rg = record.grid
    if rg.n_steps != grid.n_steps:
        problems.append(f"record length mismatch: expected {grid.n_steps} steps, "
                        f"found {rg.n_steps}")
    if rg.dt != grid.dt:
        problems.append(f"dt: record {fmt(rg.dt)}, config {fmt(grid.dt)}")
    if rg.t0 != grid.t0:
        problems.append(f"t0: record {fmt(rg.t0)}, config {fmt(grid.t0)}")
    if problems:
        raise RecordError("record does not match config: " + "; ".join(problems))


# --- time series ------------------------------------------------------------

def format_expectations(times, names, means, stderrs, master) -> str:
    """Ensemble table, one block of rows per observable in ``names`` order."""
    lines = [EXPECTATIONS_HEADER]
    for name in names:
        for t, m, s, r in zip(times, means[name], stderrs[name], master[name]):
            lines.append(f"{fmt(t)},{name},{fmt(m)},{fmt(s)},{fmt(r)}")
    return "\n".join(lines) + "\n"


def parse_expectations(text: str) -> dict[str, dict[str, np.ndarray]]:
    lines = text.splitlines()
    if not lines or lines[0] != EXPECTATIONS_HEADER:
        raise ValueError(f"expected header {EXPECTATIONS_HEADER!r}")
    cols: dict[str, dict[str, list]] = {}
    for line in lines[1:]:
        t, name, m, s, r = line.split(",")
        c = cols.setdefault(name, {"t": [], "mean": [], "stderr": [], "master": []})
        for key, v in zip(("t", "mean", "stderr", "master"), (t, m, s, r)):
            c[key].append(float(v))
    return {name: {k: np.array(v) for k, v in c.items()} for name, c in cols.items()}


def format_table(columns: dict[str, np.ndarray], int_columns=()) -> str:
    """Plain CSV with one column per key; ``int_columns`` are written as integers."""
    names = list(columns)
    n = len(next(iter(columns.values())))
    lines = [",".join(names)]
    for i in range(n):
        lines.append(",".join(str(int(columns[c][i])) if c in int_columns else fmt(columns[c][i])
                              for c in names))
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> dict[str, np.ndarray]:
    lines = text.splitlines()
    names = lines[0].split(",")
    data = [[float(v) for v in line.split(",")] for line in lines[1:]]
    arr = np.array(data).reshape(len(data), len(names))
    return {name: arr[:, j] for j, name in enumerate(names)}


# --- summaries --------------------------------------------------------------

def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def format_summary(summary: dict) -> str:
    """Deterministic JSON: sorted keys, shortest round-trip floats."""
    return json.dumps(_plain(summary), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# --- plots ------------------------------------------------------------------

def svg_plot(title: str, t, mean, err, reference, xlabel: str = "t",
             mean_label: str = "ensemble mean", ref_label: str = "master equation") -> str:
    """Minimal SVG line chart: mean with a +-1 stderr band and a reference curve."""
    w, h, ml, mr, mt, mb = 640, 400, 60, 20, 40, 50
    t, mean, err, reference = (np.asarray(a, dtype=float) for a in (t, mean, err, reference))
    lo = float(min(np.min(mean - err), np.min(reference)))
    hi = float(max(np.max(mean + err), np.max(reference)))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    t0, t1 = float(t[0]), float(t[-1]) if t[-1] > t[0] else float(t[0]) + 1.0

    def px(x):
        return ml + (x - t0) / (t1 - t0) * (w - ml - mr)

    def py(y):
        return mt + (hi - y) / (hi - lo) * (h - mt - mb)

    def path(xs, ys):
        return " ".join(f"{'M' if i == 0 else 'L'}{px(x):.2f},{py(y):.2f}"
                        for i, (x, y) in enumerate(zip(xs, ys)))

    # thin long series so files stay small
    stride = max(1, len(t) // 800)
    idx = np.unique(np.r_[np.arange(0, len(t), stride), len(t) - 1])
    ts = t[idx]
    band = path(ts, (mean + err)[idx]) + " " + " ".join(
        f"L{px(x):.2f},{py(y):.2f}" for x, y in zip(ts[::-1], (mean - err)[idx][::-1])) + " Z"
    ticks = []
    for k in range(5):
        yv = lo + (hi - lo) * k / 4
        ticks.append(f'<text x="{ml - 6}" y="{py(yv) + 4:.2f}" text-anchor="end" '
                     f'font-size="11">{yv:.3g}</text>')
        xv = t0 + (t1 - t0) * k / 4
        ticks.append(f'<text x="{px(xv):.2f}" y="{h - mb + 16}" text-anchor="middle" '
                     f'font-size="11">{xv:.3g}</text>')
    esc = title.replace("&", "&amp;").replace("<", "&lt;")
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2}" y="22" text-anchor="middle" font-size="14">{esc}</text>',
        f'<path d="M{ml},{mt} L{ml},{h - mb} L{w - mr},{h - mb}" stroke="black" fill="none"/>',
        *ticks,
        f'<text x="{(ml + w - mr) / 2}" y="{h - 12}" text-anchor="middle" '
        f'font-size="12">{xlabel}</text>',
        f'<path d="{band}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>',
        f'<path d="{path(ts, mean[idx])}" stroke="#1f77b4" fill="none" stroke-width="1.5"/>',
        f'<path d="{path(ts, reference[idx])}" stroke="#d62728" fill="none" '
        f'stroke-width="1.5" stroke-dasharray="6,4"/>',
        f'<line x1="{w - 200}" y1="{mt + 10}" x2="{w - 175}" y2="{mt + 10}" stroke="#1f77b4" '
        f'stroke-width="2"/>',
        f'<text x="{w - 170}" y="{mt + 14}" font-size="12">{mean_label} ± stderr</text>',
        f'<line x1="{w - 200}" y1="{mt + 28}" x2="{w - 175}" y2="{mt + 28}" stroke="#d62728" '
        f'stroke-width="2" stroke-dasharray="6,4"/>',
        f'<text x="{w - 170}" y="{mt + 32}" font-size="12">{ref_label}</text>',
        "</svg>",
    ]) + "\n"
