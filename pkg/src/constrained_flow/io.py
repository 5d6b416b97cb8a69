"""File output: VTK legacy ASCII snapshots and JSON run manifests."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .grid import StaggeredGrid


def write_vtk(path, grid: StaggeredGrid, fields: dict[str, np.ndarray], title: str = "snapshot"):
    """Write cell-centred scalars as a STRUCTURED_POINTS dataset.

    Arrays have shape ``(nx, ny)``; VTK wants x varying fastest, which is
    Fortran order for that layout.  Non-finite values are written as ``-1``
    so every reader can parse the file.
    """
    nx, ny = grid.shape
    lines = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx + 1} {ny + 1} 1",
        "ORIGIN 0 0 0",
        f"SPACING {grid.hx!r} {grid.hy!r} 1",
        f"CELL_DATA {nx * ny}",
    ]
    for name, arr in fields.items():
        a = np.asarray(arr, dtype=float)
        if a.shape != (nx, ny):
            raise ValueError(f"field {name!r} has shape {a.shape}, expected {(nx, ny)}")
        a = np.where(np.isfinite(a), a, -1.0)
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        flat = a.ravel(order="F")
        for i in range(0, flat.size, 8):
            lines.append(" ".join(repr(float(x)) for x in flat[i:i + 8]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_vtk(path) -> tuple[tuple[int, int], tuple[float, float], dict[str, np.ndarray]]:
    """Read a file written by :func:`write_vtk`: cell shape, spacing and fields."""
    tokens = Path(path).read_text().split("\n")
    dims = spacing = None
    fields = {}
    i = 0
    while i < len(tokens):
        line = tokens[i].strip()
        if line.startswith("DIMENSIONS"):
            d = [int(x) for x in line.split()[1:3]]
            dims = (d[0] - 1, d[1] - 1)
        elif line.startswith("SPACING"):
            spacing = tuple(float(x) for x in line.split()[1:3])
        elif line.startswith("SCALARS"):
            name = line.split()[1]
            n = dims[0] * dims[1]
            vals = []
            i += 2
            while len(vals) < n:
                vals.extend(float(x) for x in tokens[i].split())
                i += 1
            fields[name] = np.array(vals).reshape(dims, order="F")
            continue
        i += 1
    return dims, spacing, fields


def write_manifest(path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
