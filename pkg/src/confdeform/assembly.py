"""Piecewise-linear finite element forms on metric charts.

Metric and coefficient fields are sampled per cell (or per boundary facet) as
the average of their vertex values; the basis products are then integrated
exactly.  All operators act on degrees of freedom (periodic copies of a
vertex share one dof).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import BOUNDARY_M, SimplicialMesh
from .metric import MetricField

DIRECT_LIMIT = 200_000


class AssemblyError(ValueError):
    pass


class SolveError(RuntimeError):
    pass


def vertex_field(mesh: SimplicialMesh, values, name: str = "field") -> np.ndarray:
    """Broadcast a scalar, dof vector or vertex vector to vertex values."""
    if values is None:
        raise AssemblyError(f"missing {name}")
    v = np.asarray(values, dtype=float)
    if v.ndim == 0:
        return np.full(mesh.n_vertices, float(v))
    if v.shape[0] == mesh.n_vertices:
        out = v
    elif v.shape[0] == mesh.n_dofs:
        out = mesh.to_vertices(v)
    else:
        raise AssemblyError(f"{name} has {v.shape[0]} values; expected {mesh.n_vertices} vertices")
    return out


def _cell_geometry(mesh: SimplicialMesh, g: np.ndarray):
    """Per-cell metric density, inverse metric and chart basis gradients."""
    x = mesh.vertices[mesh.cells]
    E = x[:, 1:, :] - x[:, :1, :]
    vol = np.linalg.det(E) / math.factorial(mesh.dim)
    Ginv = np.linalg.inv(E)  # columns: gradients of barycentrics 1..n
    grads = np.concatenate([-Ginv.sum(axis=2, keepdims=True), Ginv], axis=2)  # (C, n, n+1)
    gc = g[mesh.cells].mean(axis=1)
    dens = np.sqrt(np.linalg.det(gc))
    return vol, dens, np.linalg.inv(gc), grads


def _facet_areas(mesh: SimplicialMesh, g: np.ndarray, facet_ids: np.ndarray) -> np.ndarray:
    n = mesh.dim
    if n == 1:
        return np.ones(facet_ids.size)
    y = mesh.vertices[mesh.facets[facet_ids]]
    E = y[:, 1:, :] - y[:, :1, :]
    gf = g[mesh.facets[facet_ids]].mean(axis=1)
    gram = np.einsum("fai,fij,fbj->fab", E, gf, E)
    return np.sqrt(np.linalg.det(gram)) / math.factorial(n - 1)


def _scatter(rows_idx: np.ndarray, local: np.ndarray, size: int) -> sp.csr_matrix:
    k = rows_idx.shape[1]
    r = np.repeat(rows_idx, k, axis=1).ravel()
    c = np.tile(rows_idx, (1, k)).ravel()
    M = sp.coo_matrix((local.ravel(), (r, c)), shape=(size, size)).tocsr()
    M.sum_duplicates()
    return M


def _mass_pattern(k: int) -> np.ndarray:
    return (np.ones((k, k)) + np.eye(k)) / (k * (k + 1))


@dataclass(frozen=True, eq=False)
class AssembledForms:
    """Stiffness, mass and boundary-mass operators for one domain.

    ``M_f``/``B_h`` carry the coefficient fields; ``M``/``B`` are the
    unweighted volume and BOUNDARY_M masses.  When ``lumped`` is set, all four
    mass-type operators are diagonal (row-sum lumping).
    """

    mesh: SimplicialMesh
    metric: MetricField
    K: sp.csr_matrix
    M: sp.csr_matrix
    M_f: sp.csr_matrix
    B: sp.csr_matrix
    B_h: sp.csr_matrix
    f: np.ndarray
    h: np.ndarray
    lumped: bool
    mass_lumped: np.ndarray
    boundary_lumped: np.ndarray
    nodes: dict = field(repr=False, default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def as_dofs(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        if v.ndim == 0:
            return np.full(self.n, float(v))
        if v.shape[0] == self.n:
            return v
        if v.shape[0] == self.mesh.n_vertices:
            return self.mesh.to_dofs(v)
        raise AssemblyError(f"field has {v.shape[0]} values; expected {self.n} dofs")

    # weighted variants reuse the per-cell geometry
    def volume_mass(self, w, lumped: bool | None = None) -> sp.csr_matrix:
        return assemble_volume_mass(self.mesh, self.metric, w, self.lumped if lumped is None else lumped)

    def boundary_mass(self, w, lumped: bool | None = None) -> sp.csr_matrix:
        return assemble_boundary_mass(self.mesh, self.metric, w, self.lumped if lumped is None else lumped)

    def volume_load(self, p) -> np.ndarray:
        """Load vector of a volume density: integral of p v."""
        return self.M @ self.as_dofs(p)

    def boundary_load(self, q) -> np.ndarray:
        """Load vector of a BOUNDARY_M density: integral of q v."""
        q = self.as_dofs(np.nan_to_num(np.asarray(q, dtype=float)) if np.ndim(q) else q)
        return self.B @ q

    def operator(self, alpha: float = 1.0, with_f: bool = True, with_h: bool = True,
                 shift: float = 0.0) -> sp.csr_matrix:
        A = alpha * self.K
        if with_f:
            A = A + self.M_f
        if with_h:
            A = A + self.B_h
        if shift:
            A = A + shift * self.M
        return A.tocsr()

    def quadratic(self, v) -> dict:
        """Values of the integrals making up the quotients, for a nodal v."""
        v = self.as_dofs(v)
        return {
            "gradient": float(v @ (self.K @ v)),
            "volume_f": float(v @ (self.M_f @ v)),
            "boundary_h": float(v @ (self.B_h @ v)),
            "volume": float(v @ (self.M @ v)),
            "boundary": float(v @ (self.B @ v)),
        }

    def normal_derivative(self, u, method: str = "recovery") -> np.ndarray:
        """Outward normal derivative of a nodal field at BOUNDARY_M dofs.

        ``recovery``: element gradient dotted with the unit conormal of each
        BOUNDARY_M facet, area-averaged at its dofs.  NaN off BOUNDARY_M.
        """
        if method != "recovery":
            raise ValueError(f"unknown flux method {method!r}")
        return recovered_flux(self, self.as_dofs(u))

    def to_coo_text(self, name: str) -> str:
        """Operator as ``row col value`` lines."""
        A = getattr(self, name).tocoo()
        lines = [f"# {name} {A.shape[0]} {A.shape[1]} {A.nnz}"]
        lines += [f"{i} {j} {v:.17g}" for i, j, v in zip(A.row, A.col, A.data)]
        return "\n".join(lines) + "\n"

    def restricted_to(self, sub: SimplicialMesh, f=None, h=None) -> "AssembledForms":
        return assemble(sub, self.metric.restrict(sub), sub.restrict(self.f) if f is None else f,
                        sub.restrict(self.h) if h is None else h, lumped=self.lumped)


def assemble_stiffness(mesh: SimplicialMesh, g: MetricField) -> sp.csr_matrix:
    vol, dens, ginv, grads = _cell_geometry(mesh, g.components)
    local = np.einsum("c,cia,cij,cjb->cab", vol * dens, grads, ginv, grads)
    local = 0.5 * (local + np.swapaxes(local, 1, 2))
    K = _scatter(mesh.dof_of_vertex[mesh.cells], local, mesh.n_dofs)
    return ((K + K.T) * 0.5).tocsr()


def assemble_volume_mass(mesh: SimplicialMesh, g: MetricField, w, lumped: bool = False) -> sp.csr_matrix:
    w = vertex_field(mesh, w, "volume weight")
    vol, dens, _, _ = _cell_geometry(mesh, g.components)
    k = mesh.dim + 1
    wc = w[mesh.cells].mean(axis=1) * vol * dens
    dofs = mesh.dof_of_vertex[mesh.cells]
    if lumped:
        d = np.bincount(dofs.ravel(), weights=np.repeat(wc / k, k), minlength=mesh.n_dofs)
        return sp.diags(d).tocsr()
    return _scatter(dofs, wc[:, None, None] * _mass_pattern(k)[None], mesh.n_dofs)


def assemble_boundary_mass(mesh: SimplicialMesh, g: MetricField, w, lumped: bool = False) -> sp.csr_matrix:
    fids = mesh.facets_with_tag(BOUNDARY_M)
    N = mesh.n_dofs
    if fids.size == 0:
        return sp.csr_matrix((N, N))
    w = np.nan_to_num(vertex_field(mesh, w, "boundary weight"))
    area = _facet_areas(mesh, g.components, fids)
    k = mesh.dim
    facets = mesh.facets[fids]
    wf = w[facets].mean(axis=1) * area
    dofs = mesh.dof_of_vertex[facets]
    if lumped:
        d = np.bincount(dofs.ravel(), weights=np.repeat(wf / k, k), minlength=N)
        return sp.diags(d).tocsr()
    return _scatter(dofs, wf[:, None, None] * _mass_pattern(k)[None], N)


def assemble(
    mesh: SimplicialMesh,
    g: MetricField,
    f=0.0,
    h=0.0,
    lumped: bool = False,
) -> AssembledForms:
    """Assemble K, M, M_f, B, B_h for a domain, metric and coefficients."""
    if mesh.n_cells == 0:
        raise AssemblyError("empty domain")
    if len(g) != mesh.n_vertices:
        raise AssemblyError("metric does not match the mesh vertices")
    f = vertex_field(mesh, f, "volume coefficient f")
    if np.any(~np.isfinite(f)):
        raise AssemblyError("volume coefficient f has missing values")
    nodes = mesh.node_classes()
    h_in = vertex_field(mesh, h, "boundary coefficient h")
    bm_v = mesh.vertex_mask(nodes["boundary_m"])
    if np.any(~np.isfinite(h_in[bm_v])):
        raise AssemblyError("boundary coefficient h missing on BOUNDARY_M vertices")
    h = np.where(bm_v, h_in, np.nan)
    K = assemble_stiffness(mesh, g)
    M = assemble_volume_mass(mesh, g, 1.0, lumped)
    M_f = assemble_volume_mass(mesh, g, f, lumped)
    B = assemble_boundary_mass(mesh, g, 1.0, lumped)
    B_h = assemble_boundary_mass(mesh, g, h, lumped)
    ml = np.asarray(assemble_volume_mass(mesh, g, 1.0, True).diagonal())
    bl = np.asarray(assemble_boundary_mass(mesh, g, 1.0, True).diagonal())
    return AssembledForms(mesh, g, K, M, M_f, B, B_h, f, h, lumped, ml, bl, nodes)


def recovered_flux(forms: AssembledForms, u: np.ndarray) -> np.ndarray:
    mesh = forms.mesh
    fids = mesh.facets_with_tag(BOUNDARY_M)
    out = np.full(forms.n, np.nan)
    if fids.size == 0:
        return out
    g = forms.metric.components
    cells = mesh.facet_cell[fids]
    x = mesh.vertices[mesh.cells[cells]]
    E = x[:, 1:, :] - x[:, :1, :]
    uc = mesh.to_vertices(u)[mesh.cells[cells]]
    grad = np.linalg.solve(E, (uc[:, 1:] - uc[:, :1])[..., None])[..., 0]  # chart covector
    gc = g[mesh.cells[cells]].mean(axis=1)
    gci = np.linalg.inv(gc)
    nu = mesh.facet_normals()[fids]
    nu_norm = np.sqrt(np.einsum("fi,fij,fj->f", nu, gci, nu))
    dudn = np.einsum("fi,fij,fj->f", nu, gci, grad) / nu_norm
    area = _facet_areas(mesh, g, fids)
    dofs = mesh.dof_of_vertex[mesh.facets[fids]]
    k = dofs.shape[1]
    num = np.bincount(dofs.ravel(), weights=np.repeat(dudn * area, k), minlength=forms.n)
    den = np.bincount(dofs.ravel(), weights=np.repeat(area, k), minlength=forms.n)
    on = den > 0
    out[on] = num[on] / den[on]
    return out


# ---------------------------------------------------------------------------
# constrained linear solves

@dataclass
class LinearSolveReport:
    solution: np.ndarray
    residual: float  # normwise backward error (max norms)
    iterations: int
    constraint: str
    flux: np.ndarray | None = None


def _smallest_ritz(A: sp.spmatrix) -> float:
    n = A.shape[0]
    if n <= 400:
        return float(np.linalg.eigvalsh(A.toarray())[0])
    try:
        return float(spla.eigsh(A, k=1, which="SA", return_eigenvectors=False, maxiter=2000, tol=1e-8)[0])
    except spla.ArpackNoConvergence:
        return float("nan")


def solve_constrained(
    A: sp.spmatrix,
    load,
    dirichlet: tuple[np.ndarray, np.ndarray] | None = None,
    tol: float = 1e-10,
    check_definite: bool = True,
) -> LinearSolveReport:
    """Solve ``A u = load`` with optional Dirichlet rows.

    ``dirichlet`` is ``(mask_or_indices, values)``.  The constrained system
    must be symmetric positive definite; singular or indefinite systems are
    reported as :class:`SolveError`.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    b = np.asarray(load, dtype=float)
    u = np.zeros(n)
    fixed = np.zeros(n, dtype=bool)
    desc = "none"
    if dirichlet is not None:
        idx, vals = dirichlet
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        fixed[idx] = True
        u[idx] = np.broadcast_to(np.asarray(vals, dtype=float), idx.shape)
        desc = f"dirichlet on {idx.size} dofs"
    free = ~fixed
    if not free.any():
        raise SolveError("all dofs are constrained")
    Aff = A[free][:, free].tocsc()
    rhs = b[free] - A[free][:, fixed] @ u[fixed]
    if check_definite:
        lam = _smallest_ritz(Aff)
        scale = max(1.0, abs(Aff).max())
        if lam <= 1e-12 * scale:
            kind = "singular" if abs(lam) <= 1e-12 * scale else "indefinite"
            raise SolveError(f"{kind} system (smallest Ritz value {lam:.3e})")
    iters = 1
    if Aff.shape[0] <= DIRECT_LIMIT:
        lu = spla.splu(Aff)
        x = lu.solve(rhs)
        x = x + lu.solve(rhs - Aff @ x)  # one refinement step
        iters = 2
    else:
        Dinv = sp.diags(1.0 / Aff.diagonal())
        count = [0]

        def tick(_):
            count[0] += 1

        x, info = spla.cg(Aff, rhs, rtol=tol, M=Dinv, maxiter=10 * Aff.shape[0], callback=tick)
        if info != 0:
            raise SolveError(f"conjugate gradient did not converge (info={info})")
        iters = count[0]
    u[free] = x
    # normwise backward error: small even when the system is nearly singular
    a_norm = float(abs(Aff).sum(axis=1).max())
    denom = a_norm * np.abs(x).max(initial=0.0) + np.abs(rhs).max(initial=0.0)
    res = float(np.abs(Aff @ x - rhs).max(initial=0.0) / max(denom, 1e-300))
    if not np.all(np.isfinite(u)):
        raise SolveError("singular system")
    if res > tol and np.linalg.norm(rhs) > 0:
        raise SolveError(f"residual {res:.3e} above tolerance {tol:.1e}")
    return LinearSolveReport(u, res, iters, desc)
