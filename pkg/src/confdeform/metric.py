"""Metric fields on chart meshes, their curvature data, conformal changes and
metric perturbations."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse import csgraph

from . import fd
from .mesh import BOUNDARY_M, SimplicialMesh

SPD_TOL = 1e-12


class MetricError(ValueError):
    pass


def _sym(T: np.ndarray) -> np.ndarray:
    return 0.5 * (T + np.swapaxes(T, -1, -2))


@dataclass(frozen=True, eq=False)
class MetricField:
    """Per-vertex metric components ``g[v, i, j]`` in chart coordinates."""

    components: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.components, dtype=float)
        if g.ndim != 3 or g.shape[1] != g.shape[2]:
            raise MetricError("metric components must have shape (N, n, n)")
        if not np.allclose(g, np.swapaxes(g, 1, 2), rtol=0, atol=1e-13 * max(1.0, np.abs(g).max())):
            raise MetricError("metric is not symmetric")
        g = _sym(g)
        lam = np.linalg.eigvalsh(g)
        if lam.min() <= SPD_TOL:
            bad = int(np.argmin(lam.min(axis=1)))
            raise MetricError(f"metric not positive definite at vertex {bad} (eigenvalue {lam.min():.3e})")
        object.__setattr__(self, "components", g)

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def __len__(self) -> int:
        return self.components.shape[0]

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.components)

    def volume_density(self) -> np.ndarray:
        return np.sqrt(np.linalg.det(self.components))

    @classmethod
    def euclidean(cls, mesh: SimplicialMesh) -> "MetricField":
        return cls(np.broadcast_to(np.eye(mesh.dim), (mesh.n_vertices, mesh.dim, mesh.dim)).copy())

    @classmethod
    def from_function(cls, mesh: SimplicialMesh, fn: Callable[[np.ndarray], np.ndarray]) -> "MetricField":
        return cls(np.asarray(fn(mesh.vertices), dtype=float))

    def restrict(self, sub: SimplicialMesh) -> "MetricField":
        return MetricField(sub.restrict(self.components))

    def perturbed(self, h: np.ndarray, t: float) -> "MetricField":
        g = self.components + t * np.asarray(h)
        try:
            np.linalg.cholesky(g - SPD_TOL * np.eye(self.dim))
        except np.linalg.LinAlgError as exc:
            raise MetricError(f"perturbed metric loses positive definiteness at t={t:g}") from exc
        return MetricField(g)


@dataclass(frozen=True, eq=False)
class GeometryData:
    """Curvature fields at vertices.

    ``H`` holds the averaged mean curvature (trace of ``A`` over n-1) and is
    NaN away from BOUNDARY_M vertices; ``A`` is zero there.
    """

    R: np.ndarray
    H: np.ndarray
    Ric: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        for name in ("Ric", "A"):
            T = np.asarray(getattr(self, name), dtype=float)
            if not np.allclose(T, np.swapaxes(T, 1, 2), atol=1e-9 * max(1.0, np.abs(T).max())):
                raise MetricError(f"{name} is not symmetric")
            object.__setattr__(self, name, _sym(T))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "H", np.asarray(self.H, dtype=float))

    def restrict(self, sub: SimplicialMesh) -> "GeometryData":
        """Restriction to a submesh; H is re-masked to the submesh's BOUNDARY_M."""
        H = sub.restrict(self.H).copy()
        A = sub.restrict(self.A).copy()
        on = boundary_vertex_mask(sub)
        H[~on] = np.nan
        A[~on] = 0.0
        return GeometryData(sub.restrict(self.R), H, sub.restrict(self.Ric), A)

    def check(self, mesh: SimplicialMesh, g: MetricField | None = None, tol: float = 1e-10) -> None:
        on = boundary_vertex_mask(mesh)
        if np.any(np.isnan(self.H[on])) or np.any(~np.isnan(self.H[~on])):
            raise MetricError("H must be defined exactly on BOUNDARY_M vertices")
        if g is not None:
            ginv = g.inverse()
            R = np.einsum("vij,vij->v", ginv, self.Ric)
            if np.max(np.abs(R - self.R), initial=0.0) > tol * max(1.0, np.abs(self.R).max()):
                raise MetricError("scalar curvature is not the trace of Ricci")
            n = g.dim
            if n > 1 and on.any():
                H = np.einsum("vij,vij->v", ginv[on], self.A[on]) / (n - 1)
                if np.max(np.abs(H - self.H[on])) > tol * max(1.0, np.abs(self.H[on]).max()):
                    raise MetricError("mean curvature is not the averaged trace of A")

    def __add__(self, other: "GeometryData") -> "GeometryData":
        return GeometryData(self.R + other.R, self.H + other.H, self.Ric + other.Ric, self.A + other.A)

    def __sub__(self, other: "GeometryData") -> "GeometryData":
        return GeometryData(self.R - other.R, self.H - other.H, self.Ric - other.Ric, self.A - other.A)


def boundary_vertex_mask(mesh: SimplicialMesh) -> np.ndarray:
    return mesh.vertex_mask(mesh.node_classes()["boundary_m"])


def geometry_from_metric(mesh: SimplicialMesh, g: MetricField) -> GeometryData:
    """Finite-difference curvature of ``g`` on a structured chart mesh."""
    R, H, Ric, A = fd.curvature_from_metric(mesh, g.components)
    return GeometryData(R, H, Ric, A)


# ---------------------------------------------------------------------------
# conformal change

@dataclass(frozen=True)
class ConformalConstants:
    n: int
    a_n: float
    c_n: float
    d_n: float
    p_int: float
    p_bdy: float
    p_conf: float


def conformal_constants(n: int) -> ConformalConstants:
    if int(n) != n or n < 3:
        raise ValueError(f"conformal constants need an integer dimension n >= 3, got {n}")
    n = int(n)
    return ConformalConstants(
        n=n,
        a_n=4 * (n - 1) / (n - 2),
        c_n=(n - 2) / (4 * (n - 1)),
        d_n=(n - 2) / 2,
        p_int=(n + 2) / (n - 2),
        p_bdy=n / (n - 2),
        p_conf=4 / (n - 2),
    )


def weak_laplacian(forms, u: np.ndarray, flux: np.ndarray | None = None) -> np.ndarray:
    """Nodal Laplace-Beltrami from the lumped weak form.

    At BOUNDARY_M nodes the boundary integral is removed with ``flux``
    (normal derivative per dof, recovered from ``u`` when omitted); at cut
    nodes the natural zero-flux condition is assumed.
    """
    u = np.asarray(u, dtype=float)
    Ku = forms.K @ u
    bm = forms.nodes["boundary_m"]
    if flux is None:
        flux = forms.normal_derivative(u)
    corr = np.zeros_like(Ku)
    corr[bm] = forms.boundary_lumped[bm] * np.asarray(flux)[bm]
    return -(Ku - corr) / forms.mass_lumped


def curvatures_after_conformal(
    geom: GeometryData,
    u,
    forms,
    flux: np.ndarray | None = None,
    laplacian: str = "weak",
):
    """Scalar and (averaged) mean curvature of ``u^(4/(n-2)) g`` per dof.

    ``laplacian="weak"`` uses the lumped finite element operator (consistent
    with the solvers); ``"fd"`` uses structured-grid finite differences for
    both the Laplacian and the normal derivative.  ``H_new`` is NaN off the
    BOUNDARY_M dofs.
    """
    mesh = forms.mesh
    cc = conformal_constants(mesh.dim)
    u = forms.as_dofs(u)
    if np.any(~np.isfinite(u)) or np.any(u <= 0):
        raise ValueError("conformal factor must be positive")
    rep = mesh.dof_vertex
    R = geom.R[rep]
    H = geom.H[rep]
    bm = forms.nodes["boundary_m"]
    if np.any(np.isnan(H[bm])):
        raise ValueError("missing boundary mean curvature on BOUNDARY_M nodes")
    if laplacian == "weak":
        if flux is None:
            flux = forms.normal_derivative(u)
        lap = weak_laplacian(forms, u, flux)
    elif laplacian == "fd":
        uv = mesh.to_vertices(u)
        g = forms.metric.components
        lap = fd.laplace_beltrami(mesh, g, uv)[rep]
        if flux is None:
            flux = fd.normal_derivative(mesh, g, uv)[rep]
    else:
        raise ValueError(f"unknown laplacian {laplacian!r}")
    R_new = u ** (-cc.p_int) * (-cc.a_n * lap + R * u)
    H_new = np.full_like(u, np.nan)
    H_new[bm] = u[bm] ** (-cc.p_bdy) * ((2.0 / (mesh.dim - 2)) * np.asarray(flux)[bm] + H[bm] * u[bm])
    return R_new, H_new


# ---------------------------------------------------------------------------
# perturbations

def contract(g: MetricField | np.ndarray, S: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Pointwise metric inner product g^{ik} g^{jl} S_ij T_kl."""
    comps = g.components if isinstance(g, MetricField) else np.asarray(g)
    ginv = np.linalg.inv(comps)
    return np.einsum("vik,vjl,vij,vkl->v", ginv, ginv, S, T)


@dataclass(frozen=True, eq=False)
class PerturbationSpec:
    h: np.ndarray  # (N, n, n) per-vertex symmetric tensor
    label: str  # ricci | second_fundamental | custom
    chi: np.ndarray | None = None
    eps: float | None = None
    profile: Callable[[np.ndarray], np.ndarray] | None = None
    distance: np.ndarray | None = None
    extension: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        if not np.allclose(h, np.swapaxes(h, 1, 2)):
            raise MetricError("perturbation tensor must be symmetric")
        object.__setattr__(self, "h", _sym(h))

    def support(self, tol: float = 0.0) -> np.ndarray:
        return np.abs(self.h).reshape(len(self.h), -1).max(axis=1) > tol


def ricci_perturbation(geom: GeometryData, chi, mesh: SimplicialMesh | None = None) -> PerturbationSpec:
    """h = -chi Ric for a nonnegative cutoff chi (vertex field)."""
    chi = np.asarray(chi, dtype=float)
    if np.any(chi < 0):
        raise ValueError("cutoff must be nonnegative")
    if mesh is not None:
        on_bdry = np.zeros(mesh.n_vertices, dtype=bool)
        on_bdry[mesh.facets.ravel()] = True
        if np.any(chi[on_bdry] != 0):
            raise ValueError("cutoff must vanish on the domain boundary")
    h = -chi[:, None, None] * geom.Ric
    if np.abs(h).max(initial=0.0) < 1e-14:
        raise ValueError("degenerate perturbation: chi * Ric vanishes identically")
    return PerturbationSpec(h=h, label="ricci", chi=chi)


def smooth_step_profile(s: np.ndarray) -> np.ndarray:
    """Profile equal to 1 at 0 and to 0 beyond 1, with C^1 matching."""
    s = np.asarray(s, dtype=float)
    out = np.where(s < 1, 0.5 * (1 + np.cos(np.pi * np.clip(s, 0, 1))), 0.0)
    return np.where(s < 0, 1.0, out)


def boundary_distance(mesh: SimplicialMesh, g: MetricField):
    """Graph distance (metric edge lengths) to the BOUNDARY_M vertices, and
    the nearest boundary vertex for each vertex."""
    graph = edge_graph(mesh, g)
    src = np.flatnonzero(boundary_vertex_mask(mesh))
    if src.size == 0:
        raise ValueError("mesh has no BOUNDARY_M vertices")
    dist, _, nearest = csgraph.dijkstra(graph, directed=False, indices=src, min_only=True,
                                         return_predecessors=True)
    return dist, nearest


def edge_graph(mesh: SimplicialMesh, g: MetricField | np.ndarray, weight: np.ndarray | None = None):
    """Sparse symmetric graph of mesh edges with lengths measured by the
    midpoint metric (optionally scaled by a per-vertex factor, averaged)."""
    from scipy.sparse import coo_matrix

    comps = g.components if isinstance(g, MetricField) else np.asarray(g)
    m = mesh.cells.shape[1]
    pairs = np.array([(a, b) for a in range(m) for b in range(a + 1, m)])
    e = mesh.cells[:, pairs].reshape(-1, 2)
    e = np.unique(np.sort(e, axis=1), axis=0)
    dx = mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]
    gm = 0.5 * (comps[e[:, 0]] + comps[e[:, 1]])
    length = np.sqrt(np.einsum("ei,eij,ej->e", dx, gm, dx))
    if weight is not None:
        w = np.asarray(weight, dtype=float)
        length = length * 0.5 * (w[e[:, 0]] + w[e[:, 1]])
    N = mesh.n_vertices
    return coo_matrix((length, (e[:, 0], e[:, 1])), shape=(N, N)).tocsr()


def second_fundamental_perturbation(
    geom: GeometryData,
    mesh: SimplicialMesh,
    g: MetricField,
    chi,
    eps: float,
    profile: Callable[[np.ndarray], np.ndarray] = smooth_step_profile,
) -> PerturbationSpec:
    """h = chi * profile(dist/eps) * A_ext, with A extended constantly along
    shortest paths from the nearest BOUNDARY_M vertex."""
    if not eps > 0:
        raise ValueError("collar width must be positive")
    chi = np.asarray(chi, dtype=float)
    if np.any(chi < 0):
        raise ValueError("cutoff must be nonnegative")
    if abs(float(profile(np.array([0.0]))[0]) - 1.0) > 1e-12 or float(profile(np.array([1.0]))[0]) != 0.0:
        raise ValueError("profile must equal 1 at 0 and vanish from 1 on")
    dist, nearest = boundary_distance(mesh, g)
    if eps > dist.max():
        raise ValueError(f"collar width {eps:g} exceeds the domain depth {dist.max():g}")
    on = boundary_vertex_mask(mesh)
    if np.abs(chi[on, None, None] * geom.A[on]).max(initial=0.0) < 1e-14:
        raise ValueError("second fundamental form vanishes on the support of the cutoff")
    A_ext = geom.A[nearest]
    weight = chi * profile(dist / eps)
    h = weight[:, None, None] * A_ext
    return PerturbationSpec(h=h, label="second_fundamental", chi=chi, eps=eps, profile=profile,
                            distance=dist, extension=A_ext)


def perturb_metric(
    mesh: SimplicialMesh,
    g: MetricField,
    pert: PerturbationSpec,
    t: float,
    reference: GeometryData | None = None,
):
    """Metric g + t h and its curvature.

    Curvature is recomputed by finite differences.  With ``reference`` (the
    exact geometry of ``g``) the finite-difference change is added to it, so
    the discretisation error of the unperturbed part cancels and ``t = 0``
    reproduces ``reference`` exactly.
    """
    gt = g.perturbed(pert.h, t) if t != 0 else g
    if reference is None:
        return gt, geometry_from_metric(mesh, gt)
    if t == 0:
        return gt, reference
    delta = geometry_from_metric(mesh, gt) - geometry_from_metric(mesh, g)
    return gt, reference + delta
