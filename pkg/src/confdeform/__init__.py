"""Conformal deformations of manifolds with boundary on simplicial charts."""
from .assembly import assemble, solve_constrained
from .catalog import model_space
from .eigen import lambda1_dirichlet, mu1, rayleigh, sigma1
from .mesh import build_exhaustion, build_structured_mesh, tag_boundary
from .metric import conformal_constants, curvatures_after_conformal

__all__ = [
    "assemble",
    "build_exhaustion",
    "build_structured_mesh",
    "conformal_constants",
    "curvatures_after_conformal",
    "lambda1_dirichlet",
    "model_space",
    "mu1",
    "rayleigh",
    "sigma1",
    "solve_constrained",
    "tag_boundary",
]
