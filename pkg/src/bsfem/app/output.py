"""Legacy ASCII VTK and diagnostics CSV writers."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, NamedTuple, Sequence

import numpy as np

from ..diagnostics import DIAG_COLUMNS
from ..mesh import SimplicialMesh, extract_surface

# VTK cell type by number of vertices per cell
VTK_CELL_TYPES = {2: 3, 3: 5, 4: 10}
BULK_FIELDS = ("U",)
SURFACE_FIELDS = ("W", "Z")


class IoError(OSError):
    pass


def _fmt(v):
    return "%.17g" % v


def write_vtk_grid(path, points, cells, point_data: Dict[str, np.ndarray],
                   title="bsfem"):
    """Write one unstructured grid; ``points`` are padded to 3 coordinates."""
    points = np.asarray(points, dtype=float)
    cells = np.asarray(cells, dtype=np.int64)
    if points.ndim != 2 or points.shape[1] > 3:
        raise ValueError(f"points must have 1-3 columns, got {points.shape}")
    pts = np.zeros((len(points), 3))
    pts[:, :points.shape[1]] = points
    k = cells.shape[1] if cells.size else 0
    if cells.size and k not in VTK_CELL_TYPES:
        raise ValueError(f"no VTK cell type with {k} vertices")
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {len(pts)} double"]
    out += [" ".join(_fmt(c) for c in p) for p in pts]
    out.append(f"CELLS {len(cells)} {len(cells) * (k + 1)}")
    out += [f"{k} " + " ".join(str(int(i)) for i in c) for c in cells]
    out.append(f"CELL_TYPES {len(cells)}")
    out += [str(VTK_CELL_TYPES[k])] * len(cells)
    if point_data:
        out.append(f"POINT_DATA {len(pts)}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float).ravel()
            if values.size != len(pts):
                raise ValueError(f"field {name} has {values.size} values for "
                                 f"{len(pts)} points")
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [_fmt(v) for v in values]
    try:
        Path(path).write_text("\n".join(out) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def surface_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + "_surface" + path.suffix)


def write_vtk(path, m: SimplicialMesh, state, fields: Sequence[str] = ("U", "W", "Z")):
    """Write the bulk grid to ``path`` and the surface grid to
    ``<stem>_surface.vtk``. Bulk fields (``U``) go to the first file,
    surface fields (``W``, ``Z``, and ``U_trace``) to the second."""
    unknown = set(fields) - set(BULK_FIELDS) - set(SURFACE_FIELDS) - {"U_trace"}
    if unknown:
        raise ValueError(f"unknown fields {sorted(unknown)}")
    bulk = {f: getattr(state, f) for f in fields if f in BULK_FIELDS}
    write_vtk_grid(path, m.vertices, m.cells, bulk, title=f"bulk t={state.time!r}")
    surf = extract_surface(m)
    sdata = {f: getattr(state, f) for f in fields if f in SURFACE_FIELDS}
    if "U_trace" in fields:
        sdata["U_trace"] = state.U[surf.bulk_index]
    write_vtk_grid(surface_path(path), surf.vertices, surf.facets, sdata,
                   title=f"surface t={state.time!r}")
    return Path(path), surface_path(path)


class VtkGrid(NamedTuple):
    points: np.ndarray
    cells: np.ndarray
    cell_types: np.ndarray
    point_data: Dict[str, np.ndarray]


def read_vtk(path) -> VtkGrid:
    """Read back a file produced by :func:`write_vtk_grid`."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not lines or not lines[0].startswith("# vtk DataFile"):
        raise ValueError("not a legacy VTK file")
    i = 4
    n = int(lines[i].split()[1])
    pts = np.array([[float(v) for v in ln.split()] for ln in lines[i + 1:i + 1 + n]])
    i += 1 + n
    nc = int(lines[i].split()[1])
    cells = [[int(v) for v in ln.split()[1:]] for ln in lines[i + 1:i + 1 + nc]]
    i += 1 + nc
    types = np.array([int(v) for v in lines[i + 1:i + 1 + nc]], dtype=int)
    i += 1 + nc
    data = {}
    if i < len(lines) and lines[i].startswith("POINT_DATA"):
        i += 1
        while i < len(lines) and lines[i].startswith("SCALARS"):
            name = lines[i].split()[1]
            data[name] = np.array([float(v) for v in lines[i + 2:i + 2 + n]])
            i += 2 + n
    return VtkGrid(pts.reshape(n, 3), np.array(cells, dtype=np.int64).reshape(nc, -1),
                   types, data)


def write_diag_csv(path, records: Iterable):
    """One header line and one row per record, 17 significant digits."""
    out = [",".join(DIAG_COLUMNS)]
    for r in records:
        row = r.row()
        out.append(",".join(str(int(v)) if c == "step" else _fmt(v)
                            for c, v in zip(DIAG_COLUMNS, row)))
    try:
        Path(path).write_text("\n".join(out) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_diag_csv(path):
    """Columns of a diagnostics CSV as a dict of float arrays."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]]).reshape(-1, len(header))
    return {h: rows[:, j] for j, h in enumerate(header)}
