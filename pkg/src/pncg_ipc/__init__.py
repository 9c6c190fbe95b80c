"""Matrix-free IPC elastodynamics with a preconditioned nonlinear CG solver."""
from .audit import AuditResult, audit_configuration, min_surface_distance
from .contact import (
    ConstraintSet, ExclusionTable, HalfSpace, PenetrationError, barrier, build_exclusion_table,
    closest_point_edge_edge, closest_point_triangle, compute_constraint_set,
)
from .elasticity import InvertedElementError, MaterialModel, Model
from .mesh import MeshError, TetMesh, box_mesh, load_mesh, merge_meshes
from .sim import Scene, SceneError, Simulation, load_scene, scene_from_dict
from .solver import (
    BetaVariant, ConvergenceRecord, IncrementalPotential, SolverConfig, SolverError, Splitting,
    pncg_solve,
)

__version__ = "0.1.0"
