"""Simplicial chart meshes with tagged boundary pieces and nested exhaustions.

A mesh lives in one coordinate chart.  Its boundary facets carry one of two
tags: ``BOUNDARY_M`` for facets lying on the manifold boundary and
``BOUNDARY_0`` for facets that cut through the interior of the manifold
(truncation cuts).  Periodic axes are handled by duplicated vertices that
share a degree of freedom.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

BOUNDARY_M = "BOUNDARY_M"
BOUNDARY_0 = "BOUNDARY_0"
TAGS = (BOUNDARY_M, BOUNDARY_0)

_TAG_CODE = {BOUNDARY_0: 0, BOUNDARY_M: 1}


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class StructuredGrid:
    """Tensor grid underlying a box mesh (vertex counts include both ends)."""

    shape: tuple[int, ...]
    origin: tuple[float, ...]
    spacing: tuple[float, ...]
    periodic: tuple[bool, ...]

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * np.arange(self.shape[axis])


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    vertices: np.ndarray  # (N, n) chart coordinates
    cells: np.ndarray  # (C, n+1) vertex indices
    facets: np.ndarray  # (F, n) boundary facets, vertex indices
    facet_cell: np.ndarray  # (F,) owning cell
    facet_tags: np.ndarray  # (F,) int8: 1 = BOUNDARY_M, 0 = BOUNDARY_0, -1 = untagged
    dof_of_vertex: np.ndarray  # (N,) periodic identification
    grid: StructuredGrid | None = None
    parent_vertex: np.ndarray | None = None
    parent_cell: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    # -- basic sizes -----------------------------------------------------
    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_dofs(self) -> int:
        return int(self.dof_of_vertex.max()) + 1 if self.n_vertices else 0

    @property
    def dof_vertex(self) -> np.ndarray:
        """Representative vertex for each dof."""
        if "dof_vertex" not in self._cache:
            rep = np.full(self.n_dofs, -1, dtype=np.int64)
            # reversed so the smallest vertex index wins
            rep[self.dof_of_vertex[::-1]] = np.arange(self.n_vertices)[::-1]
            self._cache["dof_vertex"] = rep
        return self._cache["dof_vertex"]

    def to_dofs(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return values[self.dof_vertex]

    def to_vertices(self, u) -> np.ndarray:
        return np.asarray(u)[self.dof_of_vertex]

    @property
    def periodic_pairs(self) -> np.ndarray:
        rep = self.dof_vertex[self.dof_of_vertex]
        mask = rep != np.arange(self.n_vertices)
        return np.column_stack([rep[mask], np.flatnonzero(mask)])

    # -- geometry in chart coordinates ------------------------------------
    def cell_volumes(self) -> np.ndarray:
        """Signed chart volumes of the cells."""
        x = self.vertices[self.cells]
        E = x[:, 1:, :] - x[:, :1, :]
        return np.linalg.det(E) / math.factorial(self.dim)

    def cell_centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    def facet_centroids(self) -> np.ndarray:
        return self.vertices[self.facets].mean(axis=1)

    def facet_normals(self) -> np.ndarray:
        """Outward unit chart normals (covectors, Euclidean-normalised)."""
        if "facet_normals" in self._cache:
            return self._cache["facet_normals"]
        n = self.dim
        F = self.facets.shape[0]
        cells = self.cells[self.facet_cell]
        # vertex of the owning cell not on the facet
        onf = (cells[:, :, None] == self.facets[:, None, :]).any(axis=2)
        opp = cells[~onf]
        if opp.shape[0] != F:
            raise MeshError("facet not contained in its owning cell")
        xf = self.vertices[self.facets]
        xo = self.vertices[opp]
        if n == 1:
            nu = np.sign(xf[:, 0, :] - xo)
        else:
            E = xf[:, 1:, :] - xf[:, :1, :]  # (F, n-1, n)
            nu = np.empty((F, n))
            for k in range(n):
                minor = np.delete(E, k, axis=2)
                nu[:, k] = (-1) ** k * np.linalg.det(minor)
            nu /= np.linalg.norm(nu, axis=1)[:, None]
            side = np.einsum("fi,fi->f", nu, xf[:, 0, :] - xo)
            nu[side < 0] *= -1.0
        self._cache["facet_normals"] = nu
        return nu

    # -- tags --------------------------------------------------------------
    def facets_with_tag(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.facet_tags == _TAG_CODE[tag])

    def tag_names(self) -> list[str]:
        names = {1: BOUNDARY_M, 0: BOUNDARY_0, -1: "UNTAGGED"}
        return [names[int(t)] for t in self.facet_tags]

    def _dof_mask(self, facet_ids) -> np.ndarray:
        mask = np.zeros(self.n_dofs, dtype=bool)
        mask[self.dof_of_vertex[self.facets[facet_ids].ravel()]] = True
        return mask

    def node_classes(self) -> dict[str, np.ndarray]:
        """Boolean dof masks: interior, boundary_m, boundary_0, corner."""
        if "node_classes" not in self._cache:
            bm = self._dof_mask(self.facets_with_tag(BOUNDARY_M))
            b0 = self._dof_mask(self.facets_with_tag(BOUNDARY_0))
            self._cache["node_classes"] = {
                "interior": ~(bm | b0),
                "boundary_m": bm,
                "boundary_0": b0,
                "corner": bm & b0,
            }
        return self._cache["node_classes"]

    def vertex_mask(self, dof_mask: np.ndarray) -> np.ndarray:
        return np.asarray(dof_mask)[self.dof_of_vertex]

    # -- sub-domains -------------------------------------------------------
    def submesh(self, cell_ids) -> "SimplicialMesh":
        """Restriction to a subset of cells.

        Facets on the ambient boundary keep their tag; new facets created by
        the restriction are interior cuts and get ``BOUNDARY_0``.
        """
        cell_ids = np.unique(np.asarray(cell_ids, dtype=np.int64))
        if cell_ids.size == 0:
            raise MeshError("empty cell subset")
        cells = self.cells[cell_ids]
        used = np.unique(cells)
        local = np.full(self.n_vertices, -1, dtype=np.int64)
        local[used] = np.arange(used.size)
        dof_parent = self.dof_of_vertex[used]
        _, dof_local = np.unique(dof_parent, return_inverse=True)
        facets, facet_cell = _boundary_facets(cells, self.dof_of_vertex)
        tags = np.zeros(facets.shape[0], dtype=np.int8)
        amb = _facet_key_index(self.facets, self.dof_of_vertex)
        for i, key in enumerate(_facet_keys(facets, self.dof_of_vertex)):
            j = amb.get(key)
            if j is not None:
                tags[i] = self.facet_tags[j]
        return SimplicialMesh(
            vertices=self.vertices[used],
            cells=local[cells],
            facets=local[facets],
            facet_cell=facet_cell,
            facet_tags=tags,
            dof_of_vertex=dof_local.astype(np.int64),
            grid=None,
            parent_vertex=used,
            parent_cell=cell_ids,
        )

    def restrict(self, values) -> np.ndarray:
        """Restrict a vertex field of the parent mesh to this submesh."""
        values = np.asarray(values)
        if self.parent_vertex is None:
            return values
        return values[self.parent_vertex]

    def validate(self) -> None:
        if np.any(self.cell_volumes() <= 0):
            raise MeshError("degenerate or inverted cell")
        if np.any(self.facet_tags < 0):
            raise MeshError("untagged boundary facet")
        _, counts = _facet_counts(self.cells, self.dof_of_vertex)
        if np.any(counts > 2):
            raise MeshError("facet shared by more than two cells")


def _facet_keys(facets: np.ndarray, dof_of_vertex: np.ndarray):
    keys = np.sort(dof_of_vertex[facets], axis=1)
    return [tuple(k) for k in keys.tolist()]


def _facet_key_index(facets, dof_of_vertex) -> dict:
    return {k: i for i, k in enumerate(_facet_keys(facets, dof_of_vertex))}


def _all_facets(cells: np.ndarray):
    m = cells.shape[1]
    local = [[j for j in range(m) if j != k] for k in range(m)]
    facets = cells[:, local].reshape(-1, m - 1)
    owner = np.repeat(np.arange(cells.shape[0]), m)
    return facets, owner


def _facet_counts(cells, dof_of_vertex):
    facets, _ = _all_facets(cells)
    keys = np.sort(dof_of_vertex[facets], axis=1)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return inverse.ravel(), counts


def _boundary_facets(cells: np.ndarray, dof_of_vertex: np.ndarray):
    facets, owner = _all_facets(cells)
    inverse, counts = _facet_counts(cells, dof_of_vertex)
    once = counts[inverse] == 1
    return facets[once], owner[once]


def kuhn_cell_count(resolution: Sequence[int]) -> int:
    """Number of simplices in the Kuhn subdivision of a box grid."""
    return math.prod(resolution) * math.factorial(len(resolution))


def build_structured_mesh(
    extents: Sequence[tuple[float, float]] | Sequence[float],
    resolution: Sequence[int],
    periodic: Sequence[bool] | None = None,
) -> SimplicialMesh:
    """Kuhn (Freudenthal) simplicial subdivision of a box.

    ``extents`` is a sequence of ``(lo, hi)`` pairs, or of lengths for boxes
    anchored at the origin.  Every boundary facet starts out tagged
    ``BOUNDARY_M``; use :func:`tag_boundary` to split the boundary.
    """
    ext = [(0.0, float(e)) if np.isscalar(e) else (float(e[0]), float(e[1])) for e in extents]
    n = len(ext)
    res = [int(r) for r in resolution]
    if len(res) != n:
        raise MeshError("resolution and extents differ in length")
    if any(r < 1 for r in res):
        raise MeshError("resolution must be >= 1 on every axis")
    if any(not hi - lo > 0 for lo, hi in ext):
        raise MeshError("box extents must be positive")
    per = tuple(bool(p) for p in (periodic or [False] * n))
    for a in range(n):
        if per[a] and res[a] < 2:
            raise MeshError("periodic axes need resolution >= 2")

    shape = tuple(r + 1 for r in res)
    spacing = tuple((hi - lo) / r for (lo, hi), r in zip(ext, res))
    axes = [lo + h * np.arange(s) for (lo, _), h, s in zip(ext, spacing, shape)]
    vertices = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)

    corner = np.stack(np.meshgrid(*[np.arange(r) for r in res], indexing="ij"), axis=-1).reshape(-1, n)
    simplices = []
    for perm in itertools.permutations(range(n)):
        path = [corner.copy()]
        cur = corner.copy()
        for ax in perm:
            cur = cur.copy()
            cur[:, ax] += 1
            path.append(cur)
        idx = np.stack([np.ravel_multi_index(p.T, shape) for p in path], axis=1)
        simplices.append(idx)
    cells = np.concatenate(simplices, axis=0)

    multi = np.array(np.unravel_index(np.arange(vertices.shape[0]), shape)).T
    dof_shape = tuple(r if p else r + 1 for r, p in zip(res, per))
    for a in range(n):
        if per[a]:
            multi[:, a] %= res[a]
    dof_of_vertex = np.ravel_multi_index(multi.T, dof_shape)
    _, dof_of_vertex = np.unique(dof_of_vertex, return_inverse=True)
    dof_of_vertex = dof_of_vertex.ravel().astype(np.int64)

    x = vertices[cells]
    neg = np.linalg.det(x[:, 1:, :] - x[:, :1, :]) < 0
    cells[neg, :2] = cells[neg, 1::-1]

    facets, facet_cell = _boundary_facets(cells, dof_of_vertex)
    grid = StructuredGrid(shape, tuple(lo for lo, _ in ext), spacing, per)
    return SimplicialMesh(
        vertices=vertices,
        cells=cells,
        facets=facets,
        facet_cell=facet_cell,
        facet_tags=np.ones(facets.shape[0], dtype=np.int8),
        dof_of_vertex=dof_of_vertex,
        grid=grid,
    )


FacetPredicate = Callable[[np.ndarray, np.ndarray], np.ndarray]


def tag_boundary(
    mesh: SimplicialMesh,
    rule: Mapping[str, FacetPredicate] | Callable[[np.ndarray, np.ndarray], Sequence[str]],
) -> SimplicialMesh:
    """Return a copy of ``mesh`` with boundary facets re-tagged.

    ``rule`` is either a mapping ``{tag: predicate}`` whose vectorised
    predicates receive ``(centroids, outward_normals)`` and must select every
    facet exactly once, or a callable returning one tag name per facet.
    """
    c = mesh.facet_centroids()
    nu = mesh.facet_normals()
    F = c.shape[0]
    if callable(rule) and not isinstance(rule, Mapping):
        names = list(rule(c, nu))
        if len(names) != F:
            raise MeshError("tag rule returned the wrong number of tags")
        bad = [t for t in names if t not in _TAG_CODE]
        if bad:
            raise MeshError(f"untagged facet (unknown tag {bad[0]!r})")
        tags = np.array([_TAG_CODE[t] for t in names], dtype=np.int8)
    else:
        hits = np.zeros(F, dtype=np.int64)
        tags = np.full(F, -1, dtype=np.int8)
        for tag, pred in rule.items():
            if tag not in _TAG_CODE:
                raise MeshError(f"unknown tag {tag!r}")
            sel = np.asarray(pred(c, nu), dtype=bool)
            hits += sel
            tags[sel] = _TAG_CODE[tag]
        if np.any(hits > 1):
            raise MeshError(f"facet tagged twice ({int(np.sum(hits > 1))} facets)")
        if np.any(hits == 0):
            raise MeshError(f"untagged facet ({int(np.sum(hits == 0))} facets)")
    return SimplicialMesh(
        vertices=mesh.vertices,
        cells=mesh.cells,
        facets=mesh.facets,
        facet_cell=mesh.facet_cell,
        facet_tags=tags,
        dof_of_vertex=mesh.dof_of_vertex,
        grid=mesh.grid,
        parent_vertex=mesh.parent_vertex,
        parent_cell=mesh.parent_cell,
    )


def face_rule(mesh: SimplicialMesh, faces_m: Sequence[tuple[int, str]], tol: float = 1e-9):
    """Tag rule for box meshes: facets on the listed ``(axis, 'lo'|'hi')`` faces
    become ``BOUNDARY_M``, all other boundary facets ``BOUNDARY_0``."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)

    def on_m(c, nu):
        sel = np.zeros(c.shape[0], dtype=bool)
        for axis, side in faces_m:
            target = lo[axis] if side == "lo" else hi[axis]
            sel |= np.abs(c[:, axis] - target) < tol * max(1.0, abs(target))
        return sel

    return {BOUNDARY_M: on_m, BOUNDARY_0: lambda c, nu: ~on_m(c, nu)}


# ---------------------------------------------------------------------------
# exhaustions

@dataclass(frozen=True, eq=False)
class ExhaustionSequence:
    ambient: SimplicialMesh
    levels: tuple[np.ndarray, ...]  # ambient cell-index sets, strictly nested
    domains: tuple[SimplicialMesh, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def boundary_shells(self) -> list[np.ndarray]:
        """Facet ids (into ``domains[i].facets``) of the shells
        E_0 = d_M Omega_0 and E_i = d_M Omega_i minus d_M Omega_{i-1}."""
        amb = self.ambient.dof_of_vertex
        shells = []
        seen: set = set()
        for dom in self.domains:
            mf = dom.facets_with_tag(BOUNDARY_M)
            keys = _facet_keys(dom.parent_vertex[dom.facets[mf]], amb) if mf.size else []
            shells.append(np.array([f for f, k in zip(mf, keys) if k not in seen], dtype=np.int64))
            seen.update(keys)
        return shells

    def volume_shells(self) -> list[np.ndarray]:
        """Ambient cell ids of E_0 = Omega_0 and E_i = Omega_i minus Omega_{i-1}."""
        out = [self.levels[0]]
        for a, b in zip(self.levels[:-1], self.levels[1:]):
            out.append(np.setdiff1d(b, a))
        return out


def build_exhaustion(
    mesh: SimplicialMesh,
    levels: Sequence[Callable[[np.ndarray], np.ndarray] | np.ndarray],
) -> ExhaustionSequence:
    """Nested cell subsets from centroid predicates (or explicit cell ids)."""
    cents = mesh.cell_centroids()
    sets = []
    for lev in levels:
        if callable(lev):
            ids = np.flatnonzero(np.asarray(lev(cents), dtype=bool))
        else:
            ids = np.unique(np.asarray(lev, dtype=np.int64))
        if ids.size == 0:
            raise MeshError("exhaustion level selects no cells")
        sets.append(ids)
    domains = [mesh.submesh(ids) for ids in sets]
    for j, dom in enumerate(domains):
        if dom.facets_with_tag(BOUNDARY_M).size == 0:
            raise MeshError(f"domain {j} has no BOUNDARY_M facets")
    for j in range(len(sets) - 1):
        a, b = sets[j], sets[j + 1]
        if not np.all(np.isin(a, b)) or a.size == b.size:
            raise MeshError(f"nesting violation between levels {j} and {j + 1}")
        nxt = domains[j + 1]
        cut = nxt.vertex_mask(nxt.node_classes()["boundary_0"])
        cut_parent = set(mesh.dof_of_vertex[nxt.parent_vertex[cut]].tolist())
        inner = set(mesh.dof_of_vertex[domains[j].parent_vertex].tolist())
        if cut_parent & inner:
            raise MeshError(
                f"nesting violation: domain {j} touches the interior cut of domain {j + 1}"
            )
    return ExhaustionSequence(mesh, tuple(sets), tuple(domains))
