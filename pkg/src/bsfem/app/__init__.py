"""Configuration, command line and file output."""
from .cli import main
from .config import (ConfigError, ConflictError, ParseError, RunConfig,
                     ValidationError, load_config, parse_config)
from .output import IoError, read_vtk, write_diag_csv, write_vtk, write_vtk_grid

__all__ = ["main", "ConfigError", "ConflictError", "ParseError", "RunConfig",
           "ValidationError", "load_config", "parse_config", "IoError", "read_vtk",
           "write_diag_csv", "write_vtk", "write_vtk_grid"]
