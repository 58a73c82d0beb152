"""Sectioned ``key = value`` run configuration.

Example::

    [geometry]
    kind = paper_tanh
    dim = 2

    [mesh]
    resolution = 5000

    [parameters]
    preset = full_limit_dirichlet
    reaction = linearized

    [time]
    output_times = 0, 0.002, 0.05, 0.2, 1

    [output]
    directory = runs/full_limit
    formats = csv, vtk, png

Every key is checked against the schema below; unknown sections or keys are
errors. A preset supplies parameters, geometry, time step, horizon and
initial data; individual ``delta_*`` keys may not be combined with a preset.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..diagnostics import PRESET_NAMES, UnknownPreset, regime_preset, windshield_w0
from ..geometry import KINDS, LevelSetGeometry, VelocityMode
from ..mesh import WINDSHIELD_SIGNS
from ..stepper import G_KINDS, OUTER_BCS, REACTIONS, ParameterSet

FORMATS = ("csv", "vtk", "png")
DELTA_KEYS = ("delta_omega", "delta_gamma", "delta_gamma_p", "delta_k", "delta_kp")
INITIAL_PROFILES = {"windshield": windshield_w0}

SCHEMA = {
    "geometry": {"kind", "dim", "coefficients", "outer_radius"},
    "mesh": {"resolution", "file", "grading"},
    "parameters": {"preset", *DELTA_KEYS, "g_kind", "hill_n", "outer_bc", "u_D",
                   "velocity_mode", "reaction", "solver_tol", "ext_tol"},
    "time": {"tau", "T", "output_every", "output_times"},
    "diagnostics": {"threshold", "windshield_sign"},
    "output": {"directory", "formats"},
    "initial": {"u0", "w0", "z0"},
}
REQUIRED_SECTIONS = ("mesh", "parameters")


class ConfigError(ValueError):
    """Base class; ``str()`` is a single line."""


class ParseError(ConfigError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(ConfigError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ConflictError(ConfigError):
    pass


@dataclass
class RunConfig:
    geometry: LevelSetGeometry
    params: ParameterSet
    outer_radius: float = 2.0
    mesh_resolution: Optional[int] = None
    mesh_file: Optional[Path] = None
    grading: float = 3.0
    preset: Optional[str] = None
    u0: object = 1.0
    w0: object = 1.0
    z0: object = 0.0
    output_every: int = 0
    output_times: tuple = ()
    threshold: float = 0.1
    directory: Path = Path("output")
    formats: tuple = ("csv",)
    sweep_parameter: Optional[str] = None
    sweep_values: tuple = field(default_factory=tuple)


def _float(section, key, raw, positive=False):
    try:
        v = float(raw)
    except ValueError:
        raise ValidationError(f"{section}.{key}", f"not a number: {raw!r}") from None
    if not math.isfinite(v) or (positive and v <= 0):
        raise ValidationError(f"{section}.{key}",
                              f"must be {'positive' if positive else 'finite'}, got {raw}")
    return v


def _int(section, key, raw, minimum=None):
    try:
        v = int(raw)
    except ValueError:
        raise ValidationError(f"{section}.{key}", f"not an integer: {raw!r}") from None
    if minimum is not None and v < minimum:
        raise ValidationError(f"{section}.{key}", f"must be >= {minimum}")
    return v


def _choice(section, key, raw, options):
    if raw not in options:
        raise ValidationError(f"{section}.{key}",
                              f"{raw!r} not in {{{', '.join(options)}}}")
    return raw


def _list(raw):
    return [s.strip() for s in raw.replace(";", ",").split(",") if s.strip()]


def _initial(key, raw):
    if raw in INITIAL_PROFILES:
        return INITIAL_PROFILES[raw]
    return _float("initial", key, raw)


def _read(text):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str   # keys are case sensitive (T, u_D)
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError(exc.lineno, "key outside of a [section]") from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ParseError(exc.lineno, exc.message.splitlines()[0]) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else 0
        raise ParseError(line, "expected 'key = value'") from None
    sections = {}
    for name in cp.sections():
        if name not in SCHEMA:
            raise ValidationError(name, "unknown section")
        opts = dict(cp.items(name))
        for key in opts:
            if key not in SCHEMA[name]:
                raise ValidationError(f"{name}.{key}", "unknown key")
        sections[name] = opts
    return sections


def parse_config(text: str, base_dir: Optional[Path] = None,
                 preset_override: Optional[str] = None) -> RunConfig:
    """Parse and validate a run configuration.

    Raises
    ------
    ParseError
        Malformed syntax, with the offending line number.
    ValidationError
        Unknown or missing keys and sections, or out-of-range values.
    ConflictError
        A preset combined with explicit ``delta_*`` values.
    """
    sec = _read(text)
    if preset_override is not None:
        sec.setdefault("parameters", {})["preset"] = preset_override
    for name in REQUIRED_SECTIONS:
        if name not in sec:
            raise ValidationError(name, "missing required section")
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    par = sec["parameters"]
    geo = sec.get("geometry", {})
    tim = sec.get("time", {})

    preset = None
    if "preset" in par:
        name = par["preset"]
        try:
            preset = regime_preset(name)
        except UnknownPreset:
            raise ValidationError("parameters.preset",
                                  f"{name!r} not in {{{', '.join(PRESET_NAMES)}}}") from None
        explicit = [k for k in DELTA_KEYS if k in par]
        if explicit:
            raise ConflictError(f"preset {name!r} given together with {', '.join(explicit)}")

    # geometry
    if preset is not None and not set(geo) - {"outer_radius"}:
        geometry = preset.geometry
    else:
        kind = _choice("geometry", "kind", geo.get("kind", "paper_tanh"), KINDS)
        dim = _int("geometry", "dim", geo.get("dim", "2"))
        if dim not in (2, 3):
            raise ValidationError("geometry.dim", "must be 2 or 3")
        coeffs = tuple(_float("geometry", "coefficients", c)
                       for c in _list(geo.get("coefficients", "")))
        try:
            geometry = LevelSetGeometry(dim=dim, kind=kind, params=coeffs)
        except ValueError as exc:
            raise ValidationError("geometry.coefficients", str(exc)) from None
    outer_radius = _float("geometry", "outer_radius", geo.get("outer_radius", "2.0"),
                          positive=True)

    # mesh
    msec = sec["mesh"]
    if ("resolution" in msec) == ("file" in msec):
        raise ValidationError("mesh", "give exactly one of resolution or file")
    resolution = (_int("mesh", "resolution", msec["resolution"], minimum=8)
                  if "resolution" in msec else None)
    mesh_file = None
    if "file" in msec:
        mesh_file = Path(msec["file"])
        if not mesh_file.is_absolute():
            mesh_file = base_dir / mesh_file
    elif geometry.dim == 3:
        raise ValidationError("mesh.file", "3D runs need a mesh file")
    grading = _float("mesh", "grading", msec.get("grading", "3.0"), positive=True)

    # parameters
    base = preset.params if preset is not None else ParameterSet()
    kw = {}
    for k in DELTA_KEYS:
        if k in par:
            kw[k] = _float("parameters", k, par[k], positive=True)
    if "g_kind" in par:
        raw = par["g_kind"]
        if raw.startswith("hill"):
            # hill or hill(n)
            kw["g_kind"] = "hill"
            if "(" in raw:
                kw["hill_n"] = _float("parameters", "g_kind",
                                      raw[raw.index("(") + 1:raw.rindex(")")])
        else:
            kw["g_kind"] = _choice("parameters", "g_kind", raw, G_KINDS)
    if "hill_n" in par:
        kw["hill_n"] = _float("parameters", "hill_n", par["hill_n"])
    if "outer_bc" in par:
        kw["outer_bc"] = _choice("parameters", "outer_bc", par["outer_bc"], OUTER_BCS)
    if "u_D" in par:
        kw["u_D"] = _float("parameters", "u_D", par["u_D"])
    if "velocity_mode" in par:
        kw["velocity_mode"] = VelocityMode(_choice(
            "parameters", "velocity_mode", par["velocity_mode"],
            ("zero", "harmonic_extension")))
    if "reaction" in par:
        kw["reaction"] = _choice("parameters", "reaction", par["reaction"], REACTIONS)
    for k in ("solver_tol", "ext_tol"):
        if k in par:
            kw[k] = _float("parameters", k, par[k], positive=True)
    if "tau" in tim:
        kw["tau"] = _float("time", "tau", tim["tau"], positive=True)
    if "T" in tim:
        kw["T"] = _float("time", "T", tim["T"], positive=True)
    if preset is None and not {"tau", "T"} <= set(tim):
        raise ValidationError("time", "tau and T are required without a preset")
    diag = sec.get("diagnostics", {})
    if "windshield_sign" in diag:
        kw["windshield_sign"] = _choice("diagnostics", "windshield_sign",
                                        diag["windshield_sign"], WINDSHIELD_SIGNS)
    try:
        params = base.with_(**kw)
    except ValueError as exc:
        raise ValidationError("parameters", str(exc)) from None

    # initial data
    ini = sec.get("initial", {})
    if preset is not None:
        u0, w0, z0 = preset.u0, preset.w0, preset.z0
    else:
        u0, w0, z0 = 1.0, 1.0, 0.0
    u0 = _initial("u0", ini["u0"]) if "u0" in ini else u0
    w0 = _initial("w0", ini["w0"]) if "w0" in ini else w0
    z0 = _initial("z0", ini["z0"]) if "z0" in ini else z0

    # output cadence
    every = _int("time", "output_every", tim.get("output_every", "0"), minimum=0)
    times = tuple(_float("time", "output_times", v) for v in _list(tim.get("output_times", "")))
    if any(t < 0 or t > params.T * (1 + 1e-12) for t in times):
        raise ValidationError("time.output_times", "times must lie in [0, T]")
    threshold = _float("diagnostics", "threshold",
                       diag.get("threshold", str(preset.threshold if preset else 0.1)))

    out = sec.get("output", {})
    directory = Path(out.get("directory", "output"))
    if not directory.is_absolute():
        directory = base_dir / directory
    formats = tuple(_list(out.get("formats", "csv")))
    for f in formats:
        _choice("output", "formats", f, FORMATS)

    return RunConfig(
        geometry=geometry, params=params, outer_radius=outer_radius,
        mesh_resolution=resolution, mesh_file=mesh_file, grading=grading,
        preset=preset.name if preset else None, u0=u0, w0=w0, z0=z0,
        output_every=every, output_times=times, threshold=threshold,
        directory=directory, formats=formats,
        sweep_parameter=preset.sweep_parameter if preset else None,
        sweep_values=preset.sweep_values if preset else ())


def load_config(path, preset_override=None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ValidationError("config", f"cannot read {path}: {exc}") from None
    return parse_config(text, base_dir=path.parent, preset_override=preset_override)
