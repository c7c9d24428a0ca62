"""Prescribing negative scalar curvature and boundary mean curvature.

On each exhaustion domain the truncated problem

    -a_n Lap u + R u = f u^p_int        in the domain
    (2/(n-2)) du/dn + H u = h u^p_bdy   on BOUNDARY_M
    u = 1                               on BOUNDARY_0

is solved by a shifted monotone Picard iteration between constant sub- and
supersolutions.  In weak, lumped form one step reads

    (a_n K + M[R+L] + 2(n-1) B[H+Lb]) u_new
        = M (f u^p_int + L u) + 2(n-1) B (h u^p_bdy + Lb u)

with Dirichlet rows on the cut dofs.  The factor 2(n-1) = a_n (n-2)/2 turns
the boundary condition into the natural boundary term of a_n K.  Lumped
masses and an M-matrix K make the step map order preserving.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .assembly import AssembledForms, assemble
from .mesh import ExhaustionSequence, SimplicialMesh
from .metric import (
    GeometryData,
    MetricField,
    conformal_constants,
    curvatures_after_conformal,
    edge_graph,
)

MONOTONE_SLACK = 1e-12
ROUNDOFF_FLOOR = 1e-13  # differences below this count as converged
CAP_VALUE = 1.0


class PrescriptionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# constant barriers

@dataclass
class SubSuperBounds:
    u_minus: float
    u_plus: float
    margin: float
    case: str
    stated_invariants: bool  # the four inequalities in their literal form
    limits: dict = field(default_factory=dict)

    def contains(self, u, slack: float = MONOTONE_SLACK) -> np.ndarray:
        u = np.asarray(u)
        return (u >= self.u_minus - slack) & (u <= self.u_plus + slack)


def compute_bounds(f, h, geom: GeometryData, n: int, case: str = "a", margin: float = 0.01,
                   boundary: np.ndarray | None = None) -> SubSuperBounds:
    """Constants u- < 1 < u+ that are a sub- and a supersolution.

    ``f`` and ``geom.R`` are taken over all given vertices; ``h`` and
    ``geom.H`` over ``boundary`` (a vertex mask, default: where H is
    defined).  Interior: u-^p f <= ... reduces to u-^p_conf inf f >= sup R
    and u+^p_conf sup f <= inf R.  Boundary (case b): a constant c is a
    subsolution when H <= h c^(p_conf/2) and a supersolution when
    H >= h c^(p_conf/2).
    """
    if case not in ("a", "b"):
        raise ValueError("case must be 'a' or 'b'")
    cc = conformal_constants(n)
    pc = cc.p_conf
    f = np.asarray(f, dtype=float)
    R = np.asarray(geom.R, dtype=float)
    f = np.broadcast_to(f, R.shape)
    if boundary is None:
        boundary = ~np.isnan(geom.H)
    H = np.asarray(geom.H, dtype=float)[boundary]
    hb = np.broadcast_to(np.asarray(h, dtype=float), geom.H.shape)[boundary]
    if np.any(f >= 0):
        raise PrescriptionError("hypothesis violated: f must be negative")
    if np.any(R >= 0):
        raise PrescriptionError("hypothesis violated: R must be negative")
    if case == "a":
        if np.any(np.abs(H) > 1e-12) or np.any(np.abs(hb) > 1e-12):
            raise PrescriptionError("case (a) needs H = 0 and h = 0 on BOUNDARY_M")
    else:
        if H.size == 0 or np.any(H <= 0) or np.any(hb <= 0):
            raise PrescriptionError("case (b) needs H > 0 and h > 0 on BOUNDARY_M")

    lo_int = (R.max() / f.min()) ** (1 / pc)  # u- at most this
    hi_int = (R.min() / f.max()) ** (1 / pc)  # u+ at least this
    u_minus = min(lo_int * (1 - margin), 1 - margin)
    u_plus = max(hi_int * (1 + margin), 1 + margin)
    limits = {"interior_lower_max": lo_int, "interior_upper_min": hi_int}
    stated = True
    if case == "b":
        ratio = H / hb
        lo_bdy = ratio.max() ** (2 / pc)  # u- at least this
        hi_bdy = ratio.min() ** (2 / pc)  # u+ at most this
        limits.update(boundary_lower_min=lo_bdy, boundary_upper_max=hi_bdy)
        if not lo_bdy <= u_minus:
            u_minus = lo_bdy * (1 + margin) if lo_bdy * (1 + margin) <= lo_int else u_minus
        if not u_plus <= hi_bdy:
            u_plus = hi_bdy * (1 - margin) if hi_bdy * (1 - margin) >= hi_int else u_plus
        if not (lo_bdy <= u_minus <= lo_int and hi_int <= u_plus <= hi_bdy and u_minus < 1 < u_plus):
            raise PrescriptionError("sub/supersolution inequalities unsatisfiable with the given margin")
        stated = bool(u_minus ** (pc / 2) * hb.max() <= H.min() and u_plus ** (pc / 2) * hb.min() >= H.max())
    if not u_minus < 1 < u_plus:
        raise PrescriptionError("sub/supersolution constants do not bracket the cap value 1")
    return SubSuperBounds(float(u_minus), float(u_plus), margin, case, stated, limits)


# ---------------------------------------------------------------------------
# monotone iteration

@dataclass
class IterationTrace:
    start: str
    shift: float
    shift_boundary: float
    increments: list = field(default_factory=list)
    minima: list = field(default_factory=list)
    maxima: list = field(default_factory=list)
    monotone: list = field(default_factory=list)
    sandwich: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    residual: float = float("nan")
    restarts: int = 0

    @property
    def iterations(self) -> int:
        return len(self.increments)

    @property
    def sandwich_violations(self) -> int:
        return int(sum(not s for s in self.sandwich))

    def rows(self):
        for k, (inc, lo, hi, mono, sand) in enumerate(
                zip(self.increments, self.minima, self.maxima, self.monotone, self.sandwich), start=1):
            yield {"iterate": k, "sup_increment": inc, "min": lo, "max": hi, "monotone": mono, "sandwich": sand}

    def to_csv(self, path) -> None:
        _write_csv(path, list(self.rows()))


def _write_csv(path, rows):
    if not rows:
        rows = [{}]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


def _shifts(f, R, h, H, bounds: SubSuperBounds, n: int):
    """Shifts at least sup |d/du (f u^p - R u)| over [u-, u+], raised where
    needed so that f u^p + shift * u (the right-hand side, R staying on the
    left) is nondecreasing on [u-, u+]."""
    cc = conformal_constants(n)
    ends = np.array([bounds.u_minus, bounds.u_plus])
    slope = cc.p_int * f[:, None] * ends[None] ** (cc.p_int - 1)
    lam = float(max(np.abs(slope - R[:, None]).max(), (-slope).max()))
    lam_b = 0.0
    if h.size:
        slope_b = cc.p_bdy * h[:, None] * ends[None] ** (cc.p_bdy - 1)
        lam_b = float(max(np.abs(slope_b - H[:, None]).max(), (-slope_b).max(), 0.0))
    return lam, lam_b


def _nodal(forms: AssembledForms, w) -> np.ndarray:
    """Effective nodal value of a vertex field under lumped weighting."""
    m = forms.mass_lumped
    return np.asarray(forms.volume_mass(np.asarray(w, dtype=float), lumped=True).diagonal()) / m


def _nodal_boundary(forms: AssembledForms, w) -> np.ndarray:
    b = forms.boundary_lumped
    out = np.zeros(forms.n)
    on = b > 0
    d = np.asarray(forms.boundary_mass(np.nan_to_num(np.asarray(w, dtype=float)), lumped=True).diagonal())
    out[on] = d[on] / b[on]
    return out


class _Stepper:
    """Factored step operator of the shifted iteration on one domain."""

    def __init__(self, forms, R, H, f, h, lam, lam_b, cut):
        n = forms.mesh.dim
        cc = conformal_constants(n)
        self.cc = cc
        self.kb = 2.0 * (n - 1)
        self.m = forms.mass_lumped
        self.b = forms.boundary_lumped
        self.R = _nodal(forms, R)
        self.f = _nodal(forms, f)
        self.H = _nodal_boundary(forms, H)
        self.h = _nodal_boundary(forms, h)
        self.lam, self.lam_b = lam, lam_b
        self.K = forms.K
        self.cut = cut
        self.free = ~cut
        diag = self.m * (self.R + lam) + self.kb * self.b * (self.H + lam_b)
        if np.any(self.m * (self.R + lam) <= 0):
            raise PrescriptionError("shift does not make R + shift positive")
        A = (cc.a_n * self.K + sp.diags(diag)).tocsr()
        self.A = A
        self.Aff = A[self.free][:, self.free].tocsc()
        self.Afc = A[self.free][:, self.cut]
        self.lu = spla.splu(self.Aff)

    def rhs(self, u):
        cc = self.cc
        return (self.m * (self.f * u**cc.p_int + self.lam * u)
                + self.kb * self.b * (self.h * np.abs(u) ** cc.p_bdy + self.lam_b * u))

    def step(self, u):
        out = np.empty_like(u)
        out[self.cut] = CAP_VALUE
        r = self.rhs(u)[self.free] - self.Afc @ out[self.cut]
        out[self.free] = self.lu.solve(r)
        return out

    def residual(self, u) -> float:
        """Jacobi-scaled residual of the nonlinear equations on free dofs."""
        cc = self.cc
        op = (cc.a_n * (self.K @ u) + self.m * self.R * u + self.kb * self.b * self.H * u
              - self.m * self.f * u**cc.p_int - self.kb * self.b * self.h * u**cc.p_bdy)
        d = self.A.diagonal()
        return float(np.max(np.abs(op[self.free]) / d[self.free], initial=0.0))


def cap_is_barrier(f, R, h, H) -> str | None:
    """'sub', 'super' or 'both' when the constant 1 is a barrier, else None."""
    sub = bool(np.all(R <= f) and np.all(np.nan_to_num(H) <= np.nan_to_num(h)))
    sup = bool(np.all(R >= f) and np.all(np.nan_to_num(H) >= np.nan_to_num(h)))
    if sub and sup:
        return "both"
    return "sub" if sub else ("super" if sup else None)


def monotone_solve(forms: AssembledForms, f, h, geom: GeometryData, bounds: SubSuperBounds,
                   start: str = "lower", tol: float = 1e-10, max_iter: int = 20000,
                   store_iterates: bool = False):
    """Monotone iteration on one domain; returns ``(u, trace)`` per dof."""
    mesh = forms.mesh
    n = mesh.dim
    cut = forms.nodes["boundary_0"].copy()
    if not bounds.u_minus <= CAP_VALUE <= bounds.u_plus:
        raise PrescriptionError("cap value outside the sandwich")
    fv = np.broadcast_to(np.asarray(f, dtype=float), (mesh.n_vertices,))
    Rv = np.asarray(geom.R, dtype=float)
    hv = np.nan_to_num(np.broadcast_to(np.asarray(h, dtype=float), (mesh.n_vertices,)))
    Hv = np.nan_to_num(geom.H)
    bm_v = mesh.vertex_mask(forms.nodes["boundary_m"])
    lam, lam_b = _shifts(fv, Rv, hv[bm_v], Hv[bm_v], bounds, n)
    if start == "lower":
        u0, direction = bounds.u_minus, 1.0
    elif start == "upper":
        u0, direction = bounds.u_plus, -1.0
    elif start == "cap":
        kind = cap_is_barrier(fv, Rv, hv[bm_v], Hv[bm_v])
        if kind is None:
            raise PrescriptionError("the constant 1 is neither a sub- nor a supersolution for these data")
        u0, direction = CAP_VALUE, (1.0 if kind in ("sub", "both") else -1.0)
    else:
        raise ValueError("start must be 'lower', 'upper' or 'cap'")

    for attempt in range(2):
        stepper = _Stepper(forms, Rv, Hv, fv, hv, lam, lam_b, cut)
        trace = IterationTrace(start, lam, lam_b, restarts=attempt)
        u = np.full(forms.n, u0)
        u[cut] = CAP_VALUE
        ok = True
        for _ in range(max_iter):
            new = stepper.step(u)
            inc = new - u
            trace.increments.append(float(np.abs(inc).max()))
            trace.minima.append(float(new.min()))
            trace.maxima.append(float(new.max()))
            trace.monotone.append(bool(np.all(direction * inc[~cut] >= -MONOTONE_SLACK)))
            sand = bool(np.all(bounds.contains(new)))
            trace.sandwich.append(sand)
            if store_iterates:
                trace.iterates.append(new.copy())
            u = new
            if not sand:
                ok = False
                break
            if not trace.monotone[-1]:
                raise PrescriptionError(
                    f"non-monotone step at iterate {trace.iterations} "
                    f"(worst {float((direction * inc[~cut]).min()):.3e})")
            if trace.increments[-1] <= tol:
                break
        else:
            raise PrescriptionError(f"no convergence in {max_iter} iterations")
        if ok:
            trace.residual = stepper.residual(u)
            if trace.residual > 10 * tol:
                raise PrescriptionError(f"nonlinear residual {trace.residual:.3e} above {10 * tol:.1e}")
            return u, trace
        lam, lam_b = 2 * lam, 2 * lam_b
    raise PrescriptionError("sandwich violated even with doubled shifts")


# ---------------------------------------------------------------------------
# exhaustion driver

@dataclass
class ExhaustionSolution:
    solutions: list  # per-domain dof fields
    bounds: list
    traces: list
    X_vertices: np.ndarray  # ambient vertex ids of the fixed compact
    values_on_X: list  # per-domain values at X_vertices
    differences: list  # sup_X |u_{k+1} - u_k|
    domains: list

    @property
    def limit(self) -> np.ndarray:
        return self.values_on_X[-1]

    @property
    def decreasing_from(self) -> int | None:
        """First k after which the differences decrease monotonically."""
        d = self.differences
        for k in range(len(d)):
            if all(d[j + 1] < d[j] or d[j + 1] <= ROUNDOFF_FLOOR for j in range(k, len(d) - 1)):
                return k
        return None

    def rows(self):
        for k, (tr, vals) in enumerate(zip(self.traces, self.values_on_X)):
            yield {
                "domain": k,
                "iterations": tr.iterations,
                "u_minus": self.bounds[k].u_minus,
                "u_plus": self.bounds[k].u_plus,
                "min_X": float(vals.min()),
                "max_X": float(vals.max()),
                "difference": self.differences[k - 1] if k else float("nan"),
                "sandwich_violations": tr.sandwich_violations,
                "residual": tr.residual,
            }

    def to_csv(self, path) -> None:
        _write_csv(path, list(self.rows()))


def _domain_vertex(dom: SimplicialMesh, ambient_ids: np.ndarray) -> np.ndarray:
    pos = {int(v): i for i, v in enumerate(dom.parent_vertex)}
    try:
        return np.array([pos[int(v)] for v in ambient_ids], dtype=np.int64)
    except KeyError:
        raise PrescriptionError("compact set X is not contained in every domain") from None


def exhaustion_solve(ex: ExhaustionSequence, g: MetricField, f, h, geom: GeometryData, X_cells,
                     case: str = "a", margin: float = 0.01, tol: float = 1e-10, start: str = "lower",
                     store_iterates: bool = False) -> ExhaustionSolution:
    """Solve the truncated problem on every domain and compare on X."""
    amb = ex.ambient
    X_cells = np.asarray(X_cells, dtype=np.int64)
    if not np.all(np.isin(X_cells, ex.levels[0])):
        raise PrescriptionError("compact set X must lie in the seed domain")
    Xv = np.unique(amb.cells[X_cells])
    f = np.broadcast_to(np.asarray(f, dtype=float), (amb.n_vertices,))
    h = np.broadcast_to(np.asarray(h, dtype=float), (amb.n_vertices,))
    sols, bnds, traces, vals, doms = [], [], [], [], []
    for dom in ex.domains:
        gd = geom.restrict(dom)
        fd_, hd = dom.restrict(f), dom.restrict(h)
        forms = assemble(dom, g.restrict(dom), 0.0, 0.0, lumped=True)
        bm_v = dom.vertex_mask(forms.nodes["boundary_m"])
        b = compute_bounds(fd_, hd, gd, dom.dim, case, margin, boundary=bm_v)
        u, tr = monotone_solve(forms, fd_, hd, gd, b, start=start, tol=tol, store_iterates=store_iterates)
        sols.append(u)
        bnds.append(b)
        traces.append(tr)
        vals.append(dom.to_vertices(u)[_domain_vertex(dom, Xv)])
        doms.append(dom)
    diffs = [float(np.abs(b - a).max()) for a, b in zip(vals[:-1], vals[1:])]
    out = ExhaustionSolution(sols, bnds, traces, Xv, vals, diffs, doms)
    if len(diffs) >= 2 and out.decreasing_from is None:
        raise PrescriptionError("differences on X never decrease: convergence not observed at this depth")
    return out


def bound_check(sol: ExhaustionSolution) -> dict:
    """Maxima over X per domain with a growth alarm at twice the first value."""
    maxima = [float(v.max()) for v in sol.values_on_X]
    running = np.maximum.accumulate(maxima).tolist() if maxima else []
    alarm = [m > 2 * maxima[0] for m in maxima]
    return {"maxima": maxima, "running_max": running, "alarm": alarm,
            "within_upper": [m <= b.u_plus for m, b in zip(maxima, sol.bounds)]}


# ---------------------------------------------------------------------------
# verification

@dataclass
class ResidualReport:
    interior: float  # sup |R_new - f| over interior dofs away from caps
    boundary: float  # sup |H_new - h| over BOUNDARY_M dofs away from caps and corners
    n_interior: int
    n_boundary: int
    R_new: np.ndarray
    H_new: np.ndarray
    boundary_hypothesis_flags: int  # dofs where h u^(2/(n-2)) > H


def hop_distance(mesh: SimplicialMesh, sources: np.ndarray) -> np.ndarray:
    """Edge-count distance of each dof to a set of dofs."""
    m = mesh.cells.shape[1]
    dofs = mesh.dof_of_vertex[mesh.cells]
    pairs = np.array([(a, b) for a in range(m) for b in range(a + 1, m)])
    e = dofs[:, pairs].reshape(-1, 2)
    e = e[e[:, 0] != e[:, 1]]
    G = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(mesh.n_dofs,) * 2).tocsr()
    src = np.flatnonzero(sources)
    if src.size == 0:
        return np.full(mesh.n_dofs, np.inf)
    return csgraph.dijkstra(G, directed=False, indices=src, unweighted=True, min_only=True)


def verify_prescription(u, f, h, geom: GeometryData, forms: AssembledForms, laplacian: str = "fd",
                        cap_cells: int = 2) -> ResidualReport:
    """Residuals of the prescribed curvatures for a positive factor ``u``."""
    mesh = forms.mesh
    u = forms.as_dofs(u)
    if np.any(u <= 0):
        raise PrescriptionError("conformal factor must be positive")
    R_new, H_new = curvatures_after_conformal(geom, u, forms, laplacian=laplacian)
    nodes = forms.nodes
    dist = hop_distance(mesh, nodes["boundary_0"])
    far = dist >= cap_cells
    fd = forms.as_dofs(np.broadcast_to(np.asarray(f, dtype=float), (mesh.n_vertices,)))
    hd = forms.as_dofs(np.nan_to_num(np.broadcast_to(np.asarray(h, dtype=float), (mesh.n_vertices,))))
    inner = far & ~nodes["boundary_m"]
    bnd = far & nodes["boundary_m"] & ~nodes["corner"]
    r_int = float(np.abs(R_new[inner] - fd[inner]).max(initial=0.0))
    r_bdy = float(np.abs(H_new[bnd] - hd[bnd]).max(initial=0.0))
    n = mesh.dim
    Hd = np.nan_to_num(geom.H[mesh.dof_vertex])
    bm = nodes["boundary_m"]
    flags = int(np.sum(hd[bm] * u[bm] ** (2.0 / (n - 2)) > Hd[bm] + 1e-12))
    return ResidualReport(r_int, r_bdy, int(inner.sum()), int(bnd.sum()), R_new, H_new, flags)


@dataclass
class CompletenessReport:
    min_ratio: float
    lower_bound: float
    ratios: np.ndarray
    pairs: np.ndarray

    @property
    def ok(self) -> bool:
        return self.min_ratio >= self.lower_bound - 1e-6


def completeness_check(mesh: SimplicialMesh, g: MetricField, u, c2: float | None = None,
                       n_pairs: int = 50, seed: int = 424243, pairs=None) -> CompletenessReport:
    """Graph path lengths under u^p_conf g against g for sampled vertex pairs."""
    uv = np.asarray(u, dtype=float)
    if uv.shape[0] != mesh.n_vertices:
        uv = mesh.to_vertices(uv)
    if c2 is None:
        c2 = float(uv.min())
    if not (c2 > 0 and np.all(uv >= c2 - 1e-15)):
        raise PrescriptionError("lower bound on u is not certified")
    cc = conformal_constants(mesh.dim)
    scale = uv ** (cc.p_conf / 2)
    base = edge_graph(mesh, g)
    conf = edge_graph(mesh, g, weight=scale)
    rng = np.random.default_rng(seed)
    if pairs is None:
        pairs = rng.choice(mesh.n_vertices, size=(n_pairs, 2))
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.asarray(pairs)
    src = np.unique(pairs[:, 0])
    d0 = csgraph.dijkstra(base, directed=False, indices=src)
    d1 = csgraph.dijkstra(conf, directed=False, indices=src)
    row = {s: i for i, s in enumerate(src)}
    r = np.array([d1[row[a], b] / d0[row[a], b] for a, b in pairs])
    return CompletenessReport(float(r.min()), c2 ** (cc.p_conf / 2), r, pairs)
