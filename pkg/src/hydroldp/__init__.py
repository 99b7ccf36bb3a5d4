"""Spectral-Galerkin simulation and large-deviation tools for stochastic
hydrodynamical-type systems ``du + [Au + B(u,u) + R u] dt = sigma(t,u) dW``.

Submodules
----------
core      Gelfand triple, norms, path-space norm, trajectories.
models    Shell models (GOY, Sabra), dyadic model, 2D Navier-Stokes on a torus.
noise     Covariance, noise intensities, RKHS controls.
galerkin  Semi-implicit Euler-Maruyama integrator and ensemble diagnostics.
skeleton  Deterministic controlled equation and small-noise convergence scans.
ldp       Minimum-action rate function and Monte Carlo tail probabilities.
config    Experiment configuration files.
cli       Task orchestration, output files and the ``hydroldp`` command.
"""
__version__ = "0.1.0"

from .core import GelfandTriple, NormReport, Trajectory, DimensionError, norms, check_interpolation, x_norm
from .models import (
    Model, GOY, Sabra, Dyadic, NSE2D, LinearDiagonal, RTilde, make_model,
    verify_antisymmetry, estimate_bound_constant,
)
from .noise import (
    CovarianceSpec, SigmaSpec, ControlPath, sample_wiener_increment, lq_norm,
    control_energy, check_sigma_conditions,
)
from .galerkin import (
    IntegratorConfig, BlowUpError, Ensemble, EnsembleStats, step, simulate, simulate_ensemble,
    energy_residual, apriori_moments, time_increment_statistic,
)
from .skeleton import solve_skeleton, weak_convergence_scan
from .ldp import (
    ActionProblem, MinimizerResult, action, discrete_adjoint_gradient, minimize_action,
    girsanov_weight, mc_probability, rate_scan, Event,
)
from .config import ExperimentConfig, ConfigError, parse_config
from .cli import run_experiment, write_outputs, read_trajectory

