import itertools

import numpy as np
import pytest

from bsfem.geometry import LevelSetGeometry
from bsfem.mesh import _make_mesh, build_initial_mesh, read_mesh

# Kuhn subdivision of the unit cube into 6 tetrahedra sharing the main diagonal
_KUHN = [(0, 1, 3, 7), (0, 1, 5, 7), (0, 2, 3, 7), (0, 2, 6, 7), (0, 4, 5, 7), (0, 4, 6, 7)]


def kuhn_shell(n=6, hole=2):
    """Tetrahedral mesh of ``[-n/2, n/2]^3`` minus the centred cube of side
    ``hole`` (unit cubes, 6 tets each). Returns (vertices, cells, inner, outer)."""
    idx = {}
    verts = []

    def vid(p):
        if p not in idx:
            idx[p] = len(verts)
            verts.append(p)
        return idx[p]

    lo, hi = (n - hole) // 2, (n + hole) // 2
    cells = []
    for i, j, k in itertools.product(range(n), repeat=3):
        if lo <= i < hi and lo <= j < hi and lo <= k < hi:
            continue
        corners = [vid((i + a, j + b, k + c)) for a, b, c in
                   itertools.product((0, 1), repeat=3)]
        # itertools order is (a, b, c) with c fastest: bit index 4a + 2b + c
        cells += [[corners[q] for q in t] for t in _KUHN]
    verts = np.array(verts, dtype=float) - n / 2.0
    cells = np.array(cells)
    faces = np.sort(np.concatenate([np.delete(cells, q, axis=1) for q in range(4)]), axis=1)
    uniq, counts = np.unique(faces, axis=0, return_counts=True)
    bnd = uniq[counts == 1]
    on_outer = np.all(np.abs(verts[bnd]).max(axis=2) >= n / 2.0 - 1e-12, axis=1)
    return verts, cells, bnd[~on_outer], bnd[on_outer]


def write_raw_mesh(path, verts, cells, inner, outer):
    dim = verts.shape[1]
    lines = [f"{dim} {len(verts)} {len(cells)} {len(inner)} {len(outer)}"]
    lines += [" ".join(repr(float(c)) for c in v) for v in verts]
    for arr in (cells, inner, outer):
        lines += [" ".join(str(int(i)) for i in row) for row in arr]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="session")
def tanh_geometry():
    return LevelSetGeometry(dim=2, kind="paper_tanh")


@pytest.fixture(scope="session")
def coarse_mesh(tanh_geometry):
    return build_initial_mesh(tanh_geometry, resolution=400)


@pytest.fixture(scope="session")
def disk_mesh():
    return build_initial_mesh(LevelSetGeometry(dim=2, kind="sphere"), resolution=400)


@pytest.fixture
def shell_mesh(tmp_path):
    path = write_raw_mesh(tmp_path / "shell.mesh", *kuhn_shell())
    return read_mesh(path)


@pytest.fixture(scope="session")
def diamond_ring():
    """Eight triangles between the diamonds |x|+|y| = 1 and |x|+|y| = 2."""
    inner = [(1, 0), (0, 1), (-1, 0), (0, -1)]
    verts = np.array(inner + [(2 * a, 2 * b) for a, b in inner], dtype=float)
    cells, inf, outf = [], [], []
    for k in range(4):
        i0, i1, o0, o1 = k, (k + 1) % 4, 4 + k, 4 + (k + 1) % 4
        cells += [[i0, i1, o0], [o0, o1, i1]]
        inf.append([i0, i1])
        outf.append([o0, o1])
    return _make_mesh(verts, cells, inf, outf)
