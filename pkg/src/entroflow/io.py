"""CSV and manifest I/O for measures, trajectories, and reports.

The single interchange format is CSV with a header row, '.' decimal and
',' separator: one row per grid point, coordinate columns first, the
weight column last.  Floats are written with repr, which round-trips
every double exactly, so write -> read -> write is byte-stable.
"""

from __future__ import annotations

import csv
import io as _io
import os

import numpy as np

from . import __version__
from .grid import DiscreteMeasure, Grid, build_grid

__all__ = [
    "measure_to_csv",
    "measure_from_csv",
    "write_measure",
    "read_measure",
    "write_frames",
    "write_diagnostics",
    "write_manifest",
    "manifest_text",
    "frame_filename",
]

_COORD_NAMES = ("x", "y")


def _fmt(v):
    return repr(float(v))


def measure_to_csv(measure):
    """Render a measure as CSV text (header, coordinates, then weight)."""
    grid = measure.grid
    pts = grid.points()
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(_COORD_NAMES[: grid.dim]) + ["weight"])
    for row, w in zip(pts, measure.weights):
        writer.writerow([_fmt(c) for c in row] + [_fmt(w)])
    return buf.getvalue()


def _grid_from_points(dim, coords):
    """Reconstruct the cell-centered grid a coordinate table came from."""
    axes = []
    for d in range(dim):
        vals = np.unique(coords[:, d])
        axes.append(vals)
    p = len(axes[0])
    if any(len(a) != p for a in axes):
        raise ValueError("coordinate columns do not form a square grid")
    extent = []
    for vals in axes:
        if p == 1:
            raise ValueError("cannot infer cell size from a single-point file; need p >= 2")
        h = (vals[-1] - vals[0]) / (p - 1)
        steps = np.diff(vals)
        if not np.allclose(steps, h, rtol=1e-9, atol=1e-12):
            raise ValueError("coordinates are not uniformly spaced")
        extent.append((float(vals[0] - h / 2), float(vals[-1] + h / 2)))
    return build_grid(dim, p, tuple(extent))


def measure_from_csv(text, grid=None):
    """Parse CSV text into a DiscreteMeasure.

    With grid=None the grid is inferred from the coordinate columns
    (uniform cell-centered spacing, p >= 2); rows may be in any order.
    """
    reader = csv.reader(_io.StringIO(text))
    header = next(reader, None)
    if not header or header[-1].strip() != "weight":
        raise ValueError("measure CSV needs a header ending in 'weight'")
    dim = len(header) - 1
    if dim not in (1, 2) or [h.strip() for h in header[:-1]] != list(_COORD_NAMES[:dim]):
        raise ValueError(f"unsupported measure CSV header {header!r}")
    rows = [r for r in reader if r]
    if not rows:
        raise ValueError("measure CSV has no data rows")
    try:
        data = np.array([[float(c) for c in r] for r in rows])
    except ValueError as exc:
        raise ValueError(f"non-numeric cell in measure CSV: {exc}") from None
    coords = data[:, :dim]
    weights = data[:, dim]
    if grid is None:
        grid = _grid_from_points(dim, coords)
    if len(weights) != grid.n_points:
        raise ValueError(f"expected {grid.n_points} rows, got {len(weights)}")
    # map rows onto the canonical row-major ordering
    pts = grid.points()
    order = np.lexsort(tuple(coords[:, d] for d in reversed(range(dim))))
    canon = np.lexsort(tuple(pts[:, d] for d in reversed(range(dim))))
    w = np.empty(grid.n_points)
    w[canon] = weights[order]
    if not np.allclose(pts[canon], coords[order], rtol=1e-9, atol=1e-12):
        raise ValueError("CSV coordinates do not match the grid's cell centers")
    return DiscreteMeasure(grid, w)


def write_measure(path, measure):
    with open(path, "w", newline="") as fh:
        fh.write(measure_to_csv(measure))


def read_measure(path, grid=None):
    with open(path) as fh:
        return measure_from_csv(fh.read(), grid=grid)


def frame_filename(k):
    return f"frame_{k:06d}.csv"


def write_frames(out_dir, trajectory, save_every=1):
    """Write frame_%06d.csv for every save_every-th frame (always the last).

    Returns the list of written paths.
    """
    if save_every < 1:
        raise ValueError(f"save_every must be >= 1, got {save_every}")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    last = len(trajectory.measures) - 1
    for k, m in enumerate(trajectory.measures):
        if k % save_every and k != last:
            continue
        path = os.path.join(out_dir, frame_filename(k))
        write_measure(path, m)
        paths.append(path)
    return paths


def write_diagnostics(path, trajectory):
    """diagnostics.csv: k, t, F, cost, iters, residual per frame."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "t", "F", "cost", "iters", "residual"])
        for d in trajectory.diagnostics:
            writer.writerow(
                [
                    d.k,
                    _fmt(d.t),
                    _fmt(d.free_energy),
                    _fmt(d.transport_cost),
                    d.iterations,
                    _fmt(d.marginal_residual),
                ]
            )


def manifest_text(entries):
    """Flat key=value record of resolved parameters plus the version."""
    lines = [f"version = {__version__}"]
    for key, val in entries.items():
        if isinstance(val, float):
            val = _fmt(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def write_manifest(out_dir, entries, name="manifest.txt"):
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write(manifest_text(entries))
    return path
