"""Oliker-Prussner discretization of the Monge-Ampere equation in 2D."""

from .assembly import BackgroundMesh, assemble_load, build_background_mesh
from .domain import ConvexPolygon, Disk, Domain, DomainError, NodalSet, Square, boundary_clip, generate_nodal_set
from .envelope import LowerEnvelope, NodalFunction, build_envelope, evaluate_envelope, update_value
from .problems import ProblemSpec, example1, example2, example3, get_problem, quadratic
from .solver import ConvergenceError, SolverConfig, SolveStats, residual, solve
from .subdifferential import SubdiffCell, cell_from_star, cell_oracle, polygon_area

__version__ = "0.1.0"
