"""Config-driven scenario pipelines."""

from .config import (DEFAULTS_DIR, GeneSet, GeneSpec, ScenarioConfig, build_surrogate,
                     default_config_path, load_config, render_template)
from .pipeline import combine, insert_filter, solve_many
from .report import RunReport, read_table_csv, write_table_csv
from .runners import (RUNNERS, run_adaptive_sinr, run_nonlinear_filter,
                      run_reflection_multiobjective, run_scenario, run_validation)

__all__ = [
    "DEFAULTS_DIR", "GeneSet", "GeneSpec", "RUNNERS", "RunReport", "ScenarioConfig",
    "build_surrogate", "combine", "default_config_path", "insert_filter", "load_config",
    "read_table_csv", "render_template", "run_adaptive_sinr", "run_nonlinear_filter",
    "run_reflection_multiobjective", "run_scenario", "run_validation", "solve_many",
    "write_table_csv",
]
