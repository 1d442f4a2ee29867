"""Parareal time integration with adaptive POD coarse propagators.

The package solves periodic advection-diffusion problems

    u_t - eps * lap(u) + B(x, t) . grad(u) + c u = f(x, t)

on structured grids.  A fine implicit Euler propagator on the full grid is
paired with a coarse implicit Euler propagator on a Galerkin-POD subspace
that is rebuilt from fine-solve snapshots at every parareal iteration.
"""

from .analysis import (CostModel, ErrorCurve, Speedup, coarse_accuracy_diagnostics,
                       error_curve, reference_trajectory, relative_error, speedup_model)
from .discretization import DiscreteSystem, ProblemSpec, build_grid, system_at
from .exceptions import (AssemblyError, ConfigurationError, ConsistencyError,
                         DegenerateInputError, DiagnosticsUnavailableError,
                         DimensionMismatchError, EmptySpectrumError, MetricError,
                         ParapodError, PODError, SnapshotDataError, SolverError)
from .parareal import (AdaptiveParareal, PararealRun, TimePartition, adaptive_iteration,
                       iterate_zero, plain_iteration, start_run, stopping, warmup)
from .pod import (BasisStore, PODBasis, assemble_window, augment, pod_modes, read_basis,
                  write_basis)
from .propagators import (ReducedSystem, SnapshotMatrix, coarse_propagate, extend,
                          fine_propagate, fine_step, lift, project, reduce)

__version__ = "0.1.0"

__all__ = [
    "AdaptiveParareal", "AssemblyError", "BasisStore", "ConfigurationError",
    "ConsistencyError", "CostModel", "DegenerateInputError", "DiagnosticsUnavailableError",
    "DimensionMismatchError", "DiscreteSystem", "EmptySpectrumError", "ErrorCurve",
    "MetricError", "PODBasis", "PODError", "ParapodError", "PararealRun", "ProblemSpec",
    "ReducedSystem", "SnapshotDataError", "SnapshotMatrix", "SolverError", "Speedup",
    "TimePartition", "adaptive_iteration", "assemble_window", "augment", "build_grid",
    "coarse_accuracy_diagnostics", "coarse_propagate", "error_curve", "extend",
    "fine_propagate", "fine_step", "iterate_zero", "lift", "plain_iteration",
    "pod_modes", "project", "read_basis", "reduce", "reference_trajectory",
    "relative_error", "speedup_model", "start_run", "stopping", "system_at",
    "warmup", "write_basis", "__version__",
]
