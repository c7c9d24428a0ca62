"""Finite differences on structured charts.

Curvature of a metric given by its components at grid vertices, and an
independent Laplace-Beltrami stencil used to cross-check the finite element
operators.  First derivatives use fourth-order stencils (one-sided near box
faces, wrapped on periodic axes) so that nested second derivatives keep at
least second order up to the faces.
"""
from __future__ import annotations

import numpy as np

from .mesh import BOUNDARY_M, SimplicialMesh, StructuredGrid


_EDGE0 = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0
_EDGE1 = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0


def _d(F: np.ndarray, axis: int, grid: StructuredGrid) -> np.ndarray:
    """Fourth-order first derivative along one grid axis."""
    h = grid.spacing[axis]
    F = np.moveaxis(F, axis, 0)
    if grid.periodic[axis]:
        core = F[:-1]
        d = (8 * (np.roll(core, -1, 0) - np.roll(core, 1, 0))
             - (np.roll(core, -2, 0) - np.roll(core, 2, 0))) / (12 * h)
        d = np.concatenate([d, d[:1]], axis=0)
    elif F.shape[0] < 5:
        d = np.gradient(F, h, axis=0, edge_order=min(2, F.shape[0] - 1))
    else:
        d = np.empty_like(F, dtype=float)
        d[2:-2] = (8 * (F[3:-1] - F[1:-3]) - (F[4:] - F[:-4])) / (12 * h)
        d[0] = np.tensordot(_EDGE0, F[:5], axes=1) / h
        d[1] = np.tensordot(_EDGE1, F[:5], axes=1) / h
        d[-1] = -np.tensordot(_EDGE0, F[-1:-6:-1], axes=1) / h
        d[-2] = -np.tensordot(_EDGE1, F[-1:-6:-1], axes=1) / h
    return np.moveaxis(d, 0, axis)


def gradient(F: np.ndarray, grid: StructuredGrid) -> np.ndarray:
    """Stack of partial derivatives along a new axis placed right after the
    grid axes: shape ``grid.shape + (n,) + F.shape[n:]``."""
    n = grid.ndim
    parts = [_d(F, a, grid) for a in range(n)]
    return np.stack(parts, axis=n)


def on_grid(values: np.ndarray, grid: StructuredGrid) -> np.ndarray:
    values = np.asarray(values)
    return values.reshape(grid.shape + values.shape[1:])


def off_grid(values: np.ndarray, grid: StructuredGrid) -> np.ndarray:
    return values.reshape((-1,) + values.shape[grid.ndim:])


def christoffel(g: np.ndarray, grid: StructuredGrid):
    """Christoffel symbols ``G[..., k, i, j]`` and the inverse metric."""
    ginv = np.linalg.inv(g)
    dg = gradient(g, grid)  # [..., l, i, j] = d_l g_ij
    T = (np.einsum("...ijl->...lij", dg)   # d_i g_jl
         + np.einsum("...jil->...lij", dg)  # d_j g_il
         - dg)                              # d_l g_ij
    G = 0.5 * np.einsum("...kl,...lij->...kij", ginv, T)
    return G, ginv


def ricci_from_metric(g: np.ndarray, grid: StructuredGrid):
    """Ricci tensor and scalar curvature of grid metric components."""
    G, ginv = christoffel(g, grid)
    dG = gradient(G, grid)  # [..., m, k, i, j] = d_m G^k_ij
    term1 = np.einsum("...kkij->...ij", dG)
    term2 = np.einsum("...jkik->...ij", dG)
    term3 = np.einsum("...kkl,...lij->...ij", G, G)
    term4 = np.einsum("...kjl,...lik->...ij", G, G)
    Ric = term1 - term2 + term3 - term4
    Ric = 0.5 * (Ric + np.swapaxes(Ric, -1, -2))
    R = np.einsum("...ij,...ij->...", ginv, Ric)
    return Ric, R, G, ginv


def second_fundamental_form(G, ginv, axis: int, side: int):
    """Projected second fundamental form of the coordinate face ``x_axis =
    const`` with outward side ``side`` (+1 for the upper face, -1 lower)."""
    n = G.shape[-1]
    scale = 1.0 / np.sqrt(ginv[..., axis, axis])
    A = -side * G[..., axis, :, :] * scale[..., None, None]
    nu = np.zeros(G.shape[:-3] + (n,))
    nu[..., axis] = side * scale
    eta = np.einsum("...ij,...j->...i", ginv, nu)
    P = np.eye(n) - np.einsum("...i,...j->...ij", eta, nu)
    A = np.einsum("...ik,...ij,...jl->...kl", P, A, P)
    H = np.einsum("...ij,...ij->...", ginv, A) / max(n - 1, 1)
    return A, H


def _face_sides(mesh: SimplicialMesh, grid: StructuredGrid):
    """For every BOUNDARY_M facet: the (axis, side) of the box face it lies on."""
    nu = mesh.facet_normals()
    out = []
    for f in mesh.facets_with_tag(BOUNDARY_M):
        axis = int(np.argmax(np.abs(nu[f])))
        out.append((f, axis, int(np.sign(nu[f, axis]))))
    return out


def curvature_from_metric(mesh: SimplicialMesh, g_vertices: np.ndarray):
    """Finite-difference (R, H, Ric, A) at the vertices of a structured mesh.

    ``H`` is NaN off the BOUNDARY_M vertices and uses the averaged (trace over
    n-1) normalisation.  Vertices shared by several boundary faces get the
    average of the face values.
    """
    grid = mesh.grid
    if grid is None:
        raise ValueError("finite-difference curvature needs a structured mesh")
    n = mesh.dim
    N = mesh.n_vertices
    if n == 1:
        return np.zeros(N), _boundary_nan(mesh, np.zeros(N)), np.zeros((N, 1, 1)), np.zeros((N, 1, 1))
    g = on_grid(g_vertices, grid)
    Ric, R, G, ginv = ricci_from_metric(g, grid)
    Ric = off_grid(Ric, grid)
    R = off_grid(R, grid)
    Gv = off_grid(G, grid)
    ginv_v = off_grid(ginv, grid)
    A = np.zeros((N, n, n))
    H = np.zeros(N)
    count = np.zeros(N)
    faces = {}
    for f, axis, side in _face_sides(mesh, grid):
        faces.setdefault((axis, side), set()).update(mesh.facets[f].tolist())
    for (axis, side), verts in faces.items():
        v = np.fromiter(verts, dtype=np.int64)
        Af, Hf = second_fundamental_form(Gv[v], ginv_v[v], axis, side)
        A[v] += Af
        H[v] += Hf
        count[v] += 1
    on = count > 0
    A[on] /= count[on, None, None]
    H[on] /= count[on]
    H[~on] = np.nan
    return R, H, Ric, A


def _boundary_nan(mesh, H):
    H = H.copy()
    verts = np.unique(mesh.facets[mesh.facets_with_tag(BOUNDARY_M)])
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    mask[verts] = True
    H[~mask] = np.nan
    return H


def laplace_beltrami(mesh: SimplicialMesh, g_vertices: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Delta_g u = |g|^{-1/2} d_i(|g|^{1/2} g^{ij} d_j u) by nested central
    differences on the structured grid of ``mesh`` (vertex fields)."""
    grid = mesh.grid
    if grid is None:
        raise ValueError("finite-difference Laplacian needs a structured mesh")
    g = on_grid(g_vertices, grid)
    ginv = np.linalg.inv(g)
    sq = np.sqrt(np.linalg.det(g))
    U = on_grid(u, grid)
    du = gradient(U, grid)
    flux = sq[..., None] * np.einsum("...ij,...j->...i", ginv, du)
    div = sum(_d(flux[..., a], a, grid) for a in range(grid.ndim))
    return off_grid(div / sq, grid)


def normal_derivative(mesh: SimplicialMesh, g_vertices: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Outward normal derivative of a vertex field on BOUNDARY_M box faces
    (NaN elsewhere), from one-sided second-order differences."""
    grid = mesh.grid
    if grid is None:
        raise ValueError("finite-difference normal derivative needs a structured mesh")
    ginv = np.linalg.inv(g_vertices)
    du = off_grid(gradient(on_grid(u, grid), grid), grid)
    out = np.zeros(mesh.n_vertices)
    count = np.zeros(mesh.n_vertices)
    faces = {}
    for f, axis, side in _face_sides(mesh, grid):
        faces.setdefault((axis, side), set()).update(mesh.facets[f].tolist())
    for (axis, side), verts in faces.items():
        v = np.fromiter(verts, dtype=np.int64)
        gi = ginv[v, axis, :]
        out[v] += side * np.einsum("vj,vj->v", gi, du[v]) / np.sqrt(gi[:, axis])
        count[v] += 1
    on = count > 0
    out[on] /= count[on]
    out[~on] = np.nan
    return out
