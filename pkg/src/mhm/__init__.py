"""Two-level multiscale hybrid-mixed solver for 2D Darcy flow.

The coarse mesh is a structured triangulation of the unit square.  Each
element is refined into a submesh on which independent local Neumann
problems are solved; a small saddle-point system on the mesh skeleton then
glues the local responses together.
"""

from .config import Discretization, RunConfig
from .errors import MHMError
from .femcore import ProblemData, get_problem
from .global_reducer import (build_model, compute_solution, l2_error, monolithic_oracle,
                             reduce_local_problems, split_problem)
from .local_solver import solve_local_problem
from .mesh import build_structured_mesh, refine_element
from .orchestrator import FailurePlan, RunReport, run_pipeline, static_partition_mode

__version__ = "0.1.0"

__all__ = [
    "Discretization", "FailurePlan", "MHMError", "ProblemData", "RunConfig", "RunReport",
    "build_model", "build_structured_mesh", "compute_solution", "get_problem", "l2_error",
    "monolithic_oracle", "reduce_local_problems", "refine_element", "run_pipeline",
    "solve_local_problem", "split_problem", "static_partition_mode",
]
