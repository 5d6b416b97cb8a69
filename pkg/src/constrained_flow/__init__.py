"""Navier-Stokes flow under pointwise velocity or gradient bounds, coupled to
an enthalpy Stefan model through a phase-dependent obstacle."""
from .config import (ConfigError, SimulationConfig, build_scenario, load_config,
                     parse_config, preset_config, serialize)
from .constraints import (ConstraintKind, ProjectionControl, RegularizationParams,
                          UnsupportedDegenerateK2, gradient_bound_project_K2,
                          pointwise_truncate_K1, project_constraint_solenoidal,
                          regularize_gamma, violation_report)
from .coupling import (CouplingControl, CouplingSetup, GammaProfile, MollifierResolutionError,
                       MollifierSpec, coupled_step, effective_gamma, gamma_of_phase, mollify,
                       run_coupled)
from .diagnostics import (DiagnosticLedger, bv_pairing, complementarity_report,
                          default_test_functions, var_budget)
from .grid import (GridMismatchError, ObstacleField, ScalarField, StaggeredGrid, VectorField,
                   divergence, gradient, vector_laplacian)
from .navier_stokes import (NSParams, NSState, advect, energy_report, poincare_constant,
                            run_ns, vi_time_step)
from .solenoidal import PoissonSolver, leray_project, poisson_solve
from .stefan import (BetaSpec, EnthalpyState, StefanParams, beta_eval, run_stefan,
                     stefan_energy_report, stefan_step)

__version__ = "0.1.0"

__all__ = [
    "BetaSpec", "ConfigError", "ConstraintKind", "CouplingControl", "CouplingSetup",
    "DiagnosticLedger", "EnthalpyState", "GammaProfile", "GridMismatchError",
    "MollifierResolutionError", "MollifierSpec", "NSParams", "NSState", "ObstacleField",
    "PoissonSolver", "ProjectionControl", "RegularizationParams", "ScalarField",
    "SimulationConfig", "StaggeredGrid", "StefanParams", "UnsupportedDegenerateK2",
    "VectorField", "advect", "beta_eval", "build_scenario", "bv_pairing",
    "complementarity_report", "coupled_step", "default_test_functions", "divergence",
    "effective_gamma", "energy_report", "gamma_of_phase", "gradient",
    "gradient_bound_project_K2", "leray_project", "load_config", "mollify", "parse_config",
    "pointwise_truncate_K1", "poincare_constant", "poisson_solve", "preset_config",
    "project_constraint_solenoidal", "regularize_gamma", "run_coupled", "run_ns",
    "run_stefan", "serialize", "stefan_energy_report", "stefan_step", "var_budget",
    "vector_laplacian", "violation_report",
]
