"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure. Every
failure prints one line ``error kind=<config|runtime> ... cause=<text>`` to
stderr.
"""
from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..diagnostics import DiagnosticsTracker, sweep_params
from ..mesh import (MeshFormatError, MeshGenFailure, build_initial_mesh,
                    read_mesh)
from ..stepper import SimulationError, run_simulation
from .config import ConfigError, RunConfig, ValidationError, load_config
from .output import write_diag_csv, write_vtk

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError("argv", message)


def build_parser():
    ap = _Parser(prog="bsfem", description="Evolving bulk-surface ligand/receptor "
                 "finite element simulator.")
    ap.add_argument("--config", required=True, help="run configuration file")
    ap.add_argument("--preset", help="regime preset (replaces the config's preset)")
    ap.add_argument("--out", help="output directory (overrides [output] directory)")
    ap.add_argument("--tau", type=float, help="time step")
    ap.add_argument("--tmax", type=float, help="final time T")
    ap.add_argument("--sweep", help="parameter sweep, e.g. delta_k=0.1,0.01,0.001")
    ap.add_argument("--quiet", action="store_true", help="suppress progress output")
    return ap


def _one_line(text):
    return " ".join(str(text).split())


def _fail(kind, cause, step=None):
    where = f" step={step}" if step is not None else ""
    print(f"error kind={kind}{where} cause={_one_line(cause)}", file=sys.stderr)
    return EXIT_CONFIG if kind == "config" else EXIT_RUNTIME


def parse_sweep(text):
    """``name=v1,v2,...`` to ``(name, [v1, v2, ...])``."""
    if "=" not in text:
        raise ValidationError("--sweep", "expected name=v1,v2,...")
    name, raw = text.split("=", 1)
    try:
        values = [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ValidationError("--sweep", f"non-numeric value in {raw!r}") from None
    if not values:
        raise ValidationError("--sweep", "no values")
    return name.strip(), values


def output_levels(cfg: RunConfig, n_steps: int, tau: float):
    """Levels at which field snapshots are written: level 0, every
    ``output_every`` steps, the levels closest to ``output_times``, and the
    final level."""
    levels = {0, n_steps}
    if cfg.output_every > 0:
        levels.update(range(0, n_steps + 1, cfg.output_every))
    for t in cfg.output_times:
        levels.add(min(n_steps, int(round(t / tau))))
    return sorted(levels)


def _mesh(cfg: RunConfig):
    if cfg.mesh_file is not None:
        return read_mesh(cfg.mesh_file)
    return build_initial_mesh(cfg.geometry, cfg.outer_radius, cfg.mesh_resolution,
                              grading=cfg.grading)


def run_one(cfg: RunConfig, params, out_dir: Path, mesh, quiet=True, label=""):
    """Run one simulation and write the requested outputs into ``out_dir``."""
    from ..stepper import time_grid

    out_dir.mkdir(parents=True, exist_ok=True)
    n_steps = len(time_grid(params.tau, params.T))
    levels = set(output_levels(cfg, n_steps, params.tau))
    snapshots = []
    progress_every = max(1, n_steps // 10)

    def on_step(stepper, state):
        if state.level in levels:
            if "vtk" in cfg.formats:
                write_vtk(out_dir / f"fields_{state.level:06d}.vtk", stepper.mesh,
                          state, ("U", "W", "Z", "U_trace"))
            if "png" in cfg.formats:
                snapshots.append((state.time, stepper.mesh.vertices[stepper.asm.trace_map],
                                  stepper.trace(state.U), state.W.copy(), state.Z.copy()))
        if not quiet and state.level and state.level % progress_every == 0:
            print(f"{label}step {state.level}/{n_steps} t={state.time:.4g}", flush=True)

    tracker = DiagnosticsTracker(params, cfg.threshold)
    _, records, _ = run_simulation(params, cfg.geometry, mesh, cfg.u0, cfg.w0, cfg.z0,
                                   on_step=on_step, diagnostics=tracker)
    if "csv" in cfg.formats:
        write_diag_csv(out_dir / "diagnostics.csv", records)
    if "png" in cfg.formats:
        from . import report
        report.plot_time_series(records, out_dir / "diagnostics.png", label.strip(": "))
        report.plot_surface_profiles(snapshots, out_dir / "surface_profiles.png",
                                     label.strip(": "))
    return records


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, preset_override=args.preset)
        overrides = {}
        if args.tau is not None:
            overrides["tau"] = args.tau
        if args.tmax is not None:
            overrides["T"] = args.tmax
        try:
            base = cfg.params.with_(**overrides)
        except ValueError as exc:
            raise ValidationError("argv", str(exc)) from None
        if args.out:
            cfg.directory = Path(args.out)
        runs = [("", base)]
        if args.sweep:
            name, values = parse_sweep(args.sweep)
            try:
                runs = [(f"{name}={v:g}", sweep_params(base, name, v)) for v in values]
            except ValueError as exc:
                raise ValidationError("--sweep", str(exc)) from None
    except ConfigError as exc:
        return _fail("config", f"{type(exc).__name__}: {exc}")

    try:
        mesh = _mesh(cfg)
    except (MeshGenFailure, MeshFormatError, OSError) as exc:
        return _fail("runtime", f"{type(exc).__name__}: {exc}", step=0)

    with warnings.catch_warnings():
        if args.quiet:
            warnings.simplefilter("ignore", RuntimeWarning)
        for sub, params in runs:
            out_dir = cfg.directory / sub if sub else cfg.directory
            label = f"{sub}: " if sub else ""
            try:
                records = run_one(cfg, params, out_dir, mesh, args.quiet, label)
            except SimulationError as exc:
                return _fail("runtime", f"{type(exc.cause).__name__}: {exc.cause}",
                             step=exc.step)
            except OSError as exc:
                return _fail("runtime", f"{type(exc).__name__}: {exc}")
            if not args.quiet:
                last = records[-1]
                print(f"{label}done t={last.time:.4g} mass_wz={last.mass_wz:.12g} "
                      f"max_u_trace={last.max_u_trace:.6g} -> {out_dir}")
    return EXIT_OK


if __name__ == "__main__":   # pragma: no cover
    sys.exit(main())
