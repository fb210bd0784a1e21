"""Experiment grids: spec parsing, execution, reporting and shipped presets."""

from importlib import resources

from .report import ReportError, report
from .runner import run_cell, run_grid
from .spec import Cell, ExperimentSpec, SpecError, parse_spec


def shipped_specs() -> dict[str, str]:
    """Preset name -> path of the checked-in spec file."""
    root = resources.files("moerl") / "presets"
    return {p.name[:-5]: str(p) for p in sorted(root.iterdir(), key=lambda p: p.name)
            if p.name.endswith(".json")}


__all__ = ["Cell", "ExperimentSpec", "ReportError", "SpecError", "parse_spec", "report",
           "run_cell", "run_grid", "shipped_specs"]
