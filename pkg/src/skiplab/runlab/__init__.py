"""Experiment runner, artifact emitters and the command-line entry point."""

from .emit import (Panel, PlotSpec, Series, read_jsonl, render_svg, write_csv, write_jsonl,
                   write_pgm, write_svg)
from .runner import (ConfigError, ExperimentSpec, MetricRecord, grid_cells, run_ablation_grid,
                     run_grad_dynamics, run_lr_sweep, run_probe, run_theory, run_training)

__all__ = [
    "ConfigError", "ExperimentSpec", "MetricRecord", "Panel", "PlotSpec", "Series", "grid_cells",
    "read_jsonl", "render_svg", "run_ablation_grid", "run_grad_dynamics", "run_lr_sweep",
    "run_probe", "run_theory", "run_training", "write_csv", "write_jsonl", "write_pgm",
    "write_svg",
]
