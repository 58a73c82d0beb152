import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsfem.app import cli
from bsfem.app.config import (ConflictError, ParseError, ValidationError,
                              load_config, parse_config)
from bsfem.app.output import (read_diag_csv, read_vtk, surface_path,
                              write_diag_csv, write_vtk, write_vtk_grid)
from bsfem.diagnostics import DIAG_COLUMNS, DiagnosticsRecord, windshield_w0
from bsfem.mesh import build_initial_mesh
from bsfem.geometry import LevelSetGeometry
from bsfem.stepper import FieldState

MINIMAL = """
[mesh]
resolution = 200
[parameters]
preset = full_limit_dirichlet
"""

SMALL_RUN = """
[mesh]
resolution = 120
[parameters]
preset = fast_binding
[time]
tau = 0.01
T = 0.03
output_every = 1
[output]
directory = out
formats = csv, vtk
"""


# -- configuration -------------------------------------------------------------

def test_minimal_preset_config():
    cfg = parse_config(MINIMAL)
    p = cfg.params
    assert (p.delta_omega, p.delta_gamma, p.delta_gamma_p, p.delta_k) == (0.01,) * 4
    assert p.outer_bc == "dirichlet" and cfg.mesh_resolution == 200
    assert cfg.geometry.kind == "paper_tanh" and cfg.sweep_parameter == "eps_full"


def test_explicit_parameters():
    cfg = parse_config("""
[geometry]
kind = sphere
[mesh]
resolution = 50
[parameters]
delta_k = 0.5   # inline comment
g_kind = hill(3)
velocity_mode = harmonic_extension
[time]
tau = 0.1
T = 1
[initial]
w0 = windshield
z0 = 0.25
""")
    p = cfg.params
    assert p.delta_k == 0.5 and p.g_kind == "hill" and p.hill_n == 3.0
    assert p.velocity_mode.lagrangian and cfg.geometry.stationary
    assert cfg.w0 is windshield_w0 and cfg.z0 == 0.25 and cfg.preset is None


@pytest.mark.parametrize("text, field", [
    ("", "mesh"),
    ("[mesh]\nresolution = 100\n", "parameters"),
    ("[mesh]\nresolution = 100\n[parameters]\ndelta_k = 1\n", "time"),
    ("[mesh]\nresolution = 100\n[parameters]\npreset = nope\n", "parameters.preset"),
    (MINIMAL + "speed = 3\n", "parameters.speed"),
    (MINIMAL + "[extras]\na = 1\n", "extras"),
    ("[mesh]\nresolution = x\n[parameters]\npreset = fast_binding\n", "mesh.resolution"),
    ("[mesh]\n[parameters]\npreset = fast_binding\n", "mesh"),
    (MINIMAL + "[time]\ntau = -1\n", "time.tau"),
    (MINIMAL + "[output]\nformats = csv, pdf\n", "output.formats"),
    (MINIMAL + "[time]\noutput_times = 0, 2\n", "time.output_times"),
    ("[geometry]\ndim = 3\n[mesh]\nresolution = 100\n[parameters]\n"
     "delta_k = 1\n[time]\ntau = 0.1\nT = 1\n", "mesh.file"),
])
def test_validation_errors(text, field):
    with pytest.raises(ValidationError) as err:
        parse_config(text)
    assert err.value.field == field


def test_preset_conflict():
    with pytest.raises(ConflictError):
        parse_config(MINIMAL + "delta_k = 0.1\n")


@pytest.mark.parametrize("text, line", [
    ("resolution = 3\n", 1),
    ("[mesh]\nresolution = 3\nthis line is junk\n", 3),
    ("[mesh]\nresolution = 3\nresolution = 4\n", 3),
])
def test_parse_errors_report_the_line(text, line):
    with pytest.raises(ParseError) as err:
        parse_config(text)
    assert err.value.line == line and f"line {line}" in str(err.value)


def test_relative_paths_resolve_against_the_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL_RUN)
    cfg = load_config(path)
    assert cfg.directory == tmp_path / "out"
    with pytest.raises(ValidationError):
        load_config(tmp_path / "missing.cfg")


# -- output --------------------------------------------------------------------

def test_single_triangle_vtk(tmp_path):
    path = tmp_path / "t.vtk"
    write_vtk_grid(path, [[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], {"U": [1.0, 2.0, 3.0]})
    text = path.read_text().splitlines()
    assert text[0] == "# vtk DataFile Version 3.0"
    assert "POINTS 3 double" in text and "CELLS 1 4" in text and "3 0 1 2" in text
    assert text[text.index("CELL_TYPES 1") + 1] == "5"
    grid = read_vtk(path)
    np.testing.assert_array_equal(grid.point_data["U"], [1.0, 2.0, 3.0])


def test_vtk_rejects_mismatched_field(tmp_path):
    with pytest.raises(ValueError):
        write_vtk_grid(tmp_path / "t.vtk", [[0, 0], [1, 0]], [[0, 1]], {"U": [1.0]})


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_vtk_round_trip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    m = build_initial_mesh(LevelSetGeometry(dim=2, kind="sphere"), resolution=60)
    n_s = int(np.sum(m.vertex_tags == 1))
    state = FieldState(rng.normal(size=m.n_vertices) * 1e3, rng.random(n_s),
                       rng.random(n_s) * 1e-7, 0.125)
    path = tmp_path_factory.mktemp("vtk") / "f.vtk"
    bulk, surf = write_vtk(path, m, state, ("U", "W", "Z", "U_trace"))
    assert surf == surface_path(path)
    g = read_vtk(bulk)
    np.testing.assert_allclose(g.points[:, :2], m.vertices, rtol=1e-15, atol=0)
    np.testing.assert_array_equal(g.cells, m.cells)
    np.testing.assert_allclose(g.point_data["U"], state.U, rtol=1e-15)
    s = read_vtk(surf)
    np.testing.assert_allclose(s.point_data["W"], state.W, rtol=1e-15)
    np.testing.assert_allclose(s.point_data["Z"], state.Z, rtol=1e-15)
    assert set(s.cell_types) == {3}


def test_csv_header_only_and_rows(tmp_path):
    path = tmp_path / "d.csv"
    write_diag_csv(path, [])
    assert path.read_text() == ",".join(DIAG_COLUMNS) + "\n"
    recs = [DiagnosticsRecord(k, 0.1 * k, *np.full(10, 1.0 / 3)) for k in range(2)]
    write_diag_csv(path, recs)
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and all(len(ln.split(",")) == 12 for ln in lines)
    assert lines[2].startswith("1,")
    cols = read_diag_csv(path)
    assert cols["mass_u"][0] == 1.0 / 3


# -- command line ----------------------------------------------------------------

def _write(tmp_path, text=SMALL_RUN):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


def test_cli_run_writes_outputs(tmp_path, capsys):
    cfg = _write(tmp_path)
    assert cli.main(["--config", str(cfg), "--quiet"]) == 0
    out = tmp_path / "out"
    cols = read_diag_csv(out / "diagnostics.csv")
    assert list(cols["step"]) == [0, 1, 2, 3]
    np.testing.assert_allclose(cols["mass_wz"], cols["mass_wz"][0], rtol=1e-12)
    assert len(list(out.glob("fields_*_surface.vtk"))) == 4
    assert len(list(out.glob("fields_*.vtk"))) == 8


def test_cli_is_deterministic(tmp_path):
    cfg = _write(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["--config", str(cfg), "--quiet", "--out", str(a)]) == 0
    assert cli.main(["--config", str(cfg), "--quiet", "--out", str(b)]) == 0
    assert (a / "diagnostics.csv").read_bytes() == (b / "diagnostics.csv").read_bytes()


def test_cli_sweep(tmp_path):
    cfg = _write(tmp_path)
    code = cli.main(["--config", str(cfg), "--quiet", "--tmax", "0.02",
                     "--sweep", "delta_k=0.1,0.01,0.001"])
    assert code == 0
    dirs = sorted(p.name for p in (tmp_path / "out").iterdir() if p.is_dir())
    assert dirs == ["delta_k=0.001", "delta_k=0.01", "delta_k=0.1"]
    for d in dirs:
        assert len(read_diag_csv(tmp_path / "out" / d / "diagnostics.csv")["step"]) == 3


def test_cli_report_pngs(tmp_path):
    cfg = _write(tmp_path, SMALL_RUN.replace("csv, vtk", "csv, png"))
    assert cli.main(["--config", str(cfg), "--quiet"]) == 0
    for name in ("diagnostics.png", "surface_profiles.png"):
        data = (tmp_path / "out" / name).read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"


@pytest.mark.parametrize("argv_tail, code", [
    (["--bogus"], 1),
    (["--sweep", "delta_k"], 1),
    (["--sweep", "gamma=1"], 1),
    (["--tau", "-1"], 1),
    (["--preset", "nope"], 1),
])
def test_cli_config_errors(tmp_path, capsys, argv_tail, code):
    cfg = _write(tmp_path)
    assert cli.main(["--config", str(cfg), "--quiet"] + argv_tail) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error kind=config cause=")


def test_cli_missing_config(tmp_path, capsys):
    assert cli.main(["--config", str(tmp_path / "none.cfg")]) == 1
    assert "kind=config" in capsys.readouterr().err


def test_cli_runtime_failure(tmp_path, capsys):
    # a tolerance far below rounding cannot be met by the first bulk solve
    cfg = _write(tmp_path, SMALL_RUN.replace("preset = fast_binding",
                                             "preset = fast_binding\nsolver_tol = 1e-300"))
    assert cli.main(["--config", str(cfg), "--quiet"]) == 2
    err = capsys.readouterr().err
    assert "kind=runtime step=1" in err


def test_cli_bad_mesh_file(tmp_path, capsys):
    (tmp_path / "bad.mesh").write_text("2 1\n")
    cfg = _write(tmp_path, SMALL_RUN.replace("resolution = 120", "file = bad.mesh"))
    assert cli.main(["--config", str(cfg), "--quiet"]) == 2
    assert "kind=runtime step=0" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bsfem", "--config",
                           str(tmp_path / "none.cfg")], capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr.startswith("error kind=config")


def test_output_levels():
    cfg = parse_config(MINIMAL + "[time]\noutput_every = 400\noutput_times = 0.002, 0.5\n")
    assert cli.output_levels(cfg, 1000, 1e-3) == [0, 2, 400, 500, 800, 1000]
