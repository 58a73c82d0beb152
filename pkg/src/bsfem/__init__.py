"""Evolving bulk-surface finite elements for ligand/receptor/complex kinetics.

Modules: :mod:`geometry` (level sets), :mod:`mesh` (moving simplicial
meshes), :mod:`fem` (P1 assembly), :mod:`sparse` (storage and Krylov
solvers), :mod:`stepper` (IMEX time loop), :mod:`diagnostics` and
:mod:`app` (config, CLI, output).
"""
__version__ = "0.1.0"
