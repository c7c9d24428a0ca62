"""Weights, linear solves, flattening and the deformation pipelines.

Discrete conventions used throughout (all on lumped forms):

* ``m``, ``b``: lumped volume and BOUNDARY_M masses per dof;
  ``f_eff = diag(M_f)/m`` and ``h_eff = diag(B_h)/b`` are the nodal
  coefficients the lumped operators actually see.
* A nodal field ``v`` with boundary flux ``flux`` (outward normal derivative
  at BOUNDARY_M dofs) has interior operator
  ``L(v) = (K v - b*flux)/m + f_eff*v`` at every dof and boundary operator
  ``Bd(v) = flux + h_eff*v`` at BOUNDARY_M dofs.
* The flux of a linear solve is the consistent one: whatever the boundary
  equation leaves over (``q - h_eff*u`` for a Robin load, ``-h_eff*u`` for a
  volume load), so the interior equation holds at boundary dofs too.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize as sopt

from .assembly import AssembledForms, LinearSolveReport, SolveError, assemble, solve_constrained
from .catalog import ModelSpace, scaled_model
from .eigen import INDETERMINATE_TOL, EigenError, EigenResult, mu1, sigma1
from .mesh import BOUNDARY_M, ExhaustionSequence, SimplicialMesh, build_exhaustion
from .metric import (
    GeometryData,
    MetricError,
    MetricField,
    PerturbationSpec,
    conformal_constants,
    contract,
    curvatures_after_conformal,
    perturb_metric,
    ricci_perturbation,
    second_fundamental_perturbation,
)

CERT_TOL = 1e-10
BISECTION_STEPS = 60


class DeformationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# weights

@dataclass
class WeightSpec:
    kind: str  # "boundary" or "volume"
    shells: list  # boundary: facet ids per domain; volume: ambient cell ids per shell
    coefficients: np.ndarray
    eigenvalues: np.ndarray
    field: np.ndarray  # ambient vertex values (0 off the carrier)
    level: np.ndarray  # shell index setting each vertex value, -1 off the carrier

    def on(self, mesh: SimplicialMesh) -> np.ndarray:
        """Weight restricted to a domain of the exhaustion."""
        return mesh.restrict(self.field)


def _shell_levels(ex: ExhaustionSequence, kind: str):
    """Per ambient vertex: list of shell indices touching it."""
    N = ex.ambient.n_vertices
    best = np.full(N, -1)
    cand = [set() for _ in range(N)]
    if kind == "boundary":
        for i, (dom, fids) in enumerate(zip(ex.domains, ex.boundary_shells())):
            if fids.size == 0:
                continue
            verts = np.unique(dom.parent_vertex[dom.facets[fids]])
            for v in verts:
                cand[v].add(i)
    else:
        cells = ex.ambient.cells
        for i, ids in enumerate(ex.volume_shells()):
            for v in np.unique(cells[ids]):
                cand[v].add(i)
    # periodic copies share a dof, hence a value
    dof = ex.ambient.dof_of_vertex
    merged: dict = {}
    for v in range(N):
        merged.setdefault(dof[v], set()).update(cand[v])
    return [merged[dof[v]] for v in range(N)], best


def build_weight(
    ex: ExhaustionSequence,
    g: MetricField,
    f,
    h,
    kind: str = "boundary",
    lumped: bool = True,
    n_samples: int = 20,
    seed: int = 424243,
) -> WeightSpec:
    """Shell-wise constant weight with C_i = lambda_1(Omega_i) / 2^(i+1).

    ``lambda_1`` is sigma_1 for the boundary kind and mu_1 for the volume
    kind.  Vertices shared by several shells take the smallest coefficient,
    so the piecewise-linear weight never exceeds the shell bound.
    """
    if kind not in ("boundary", "volume"):
        raise ValueError("kind must be 'boundary' or 'volume'")
    amb = ex.ambient
    f = np.broadcast_to(np.asarray(f, dtype=float), (amb.n_vertices,)).copy()
    h = np.broadcast_to(np.asarray(h, dtype=float), (amb.n_vertices,)).copy()
    _check_outside_seed(ex, f, h)
    eig = []
    for i, dom in enumerate(ex.domains):
        forms = assemble(dom, g.restrict(dom), dom.restrict(f), dom.restrict(h), lumped=lumped)
        res = sigma1(forms) if kind == "boundary" else mu1(forms)
        if i == 0 and not res.value > 0:
            raise DeformationError(f"seed eigenvalue {res.value:.3e} is not positive")
        if not res.value > 0:
            raise DeformationError(f"eigenvalue of domain {i} is {res.value:.3e}; monotonicity failed")
        eig.append(res.value)
    eig = np.array(eig)
    C = eig / 2.0 ** (np.arange(len(eig)) + 1)
    cand, level = _shell_levels(ex, kind)
    values = np.zeros(amb.n_vertices)
    for v, s in enumerate(cand):
        if s:
            i = min(s, key=lambda k: (C[k], k))
            values[v] = C[i]
            level[v] = i
    shells = ex.boundary_shells() if kind == "boundary" else ex.volume_shells()
    w = WeightSpec(kind, shells, C, eig, values, level)
    if n_samples:
        bad = weight_inequality_violations(w, ex, g, f, h, n_samples, seed, lumped)
        if any(bad):
            raise DeformationError(f"weight inequality violated on domains {np.flatnonzero(bad).tolist()}")
    return w


def _check_outside_seed(ex: ExhaustionSequence, f, h, rel_tol: float = 1e-12):
    """Sign hypotheses off the seed domain, up to rounding of the data."""
    amb = ex.ambient
    tol = rel_tol * max(1.0, float(np.abs(f).max()), float(np.abs(h).max()))
    inner_cells = set(ex.levels[0].tolist())
    outer = np.array([c for c in ex.levels[-1] if c not in inner_cells], dtype=np.int64)
    if outer.size:
        verts = np.unique(amb.cells[outer])
        if np.any(f[verts] < -tol):
            raise DeformationError("hypothesis violated: f < 0 outside the seed domain")
    shells = ex.boundary_shells()
    for dom, fids in zip(ex.domains[1:], shells[1:]):
        if fids.size:
            verts = np.unique(dom.parent_vertex[dom.facets[fids]])
            if np.any(h[verts] < -tol):
                raise DeformationError("hypothesis violated: h < 0 on the boundary outside the seed domain")


def weight_inequality_violations(
    w: WeightSpec,
    ex: ExhaustionSequence,
    g: MetricField,
    f,
    h,
    n_samples: int = 100,
    seed: int = 424243,
    lumped: bool = True,
) -> list[int]:
    """Count random nodal fields breaking the weighted inequality per domain."""
    rng = np.random.default_rng(seed)
    N = ex.ambient.n_vertices
    f = np.broadcast_to(np.asarray(f, dtype=float), (N,))
    h = np.broadcast_to(np.asarray(h, dtype=float), (N,))
    out = []
    for dom in ex.domains:
        forms = assemble(dom, g.restrict(dom), dom.restrict(f), dom.restrict(h), lumped=lumped)
        weight = w.on(dom)
        lhs_op = forms.boundary_mass(weight) if w.kind == "boundary" else forms.volume_mass(weight)
        A = forms.operator()
        bad = 0
        for _ in range(n_samples):
            v = rng.standard_normal(forms.n)
            lhs = v @ (lhs_op @ v)
            rhs = v @ (A @ v)
            if lhs > rhs + 1e-12 * max(1.0, abs(rhs)):
                bad += 1
        out.append(bad)
    return out


# ---------------------------------------------------------------------------
# linear solves

def nodal_coefficients(forms: AssembledForms):
    """Lumped masses and the effective nodal coefficients they imply."""
    m = forms.mass_lumped
    b = forms.boundary_lumped
    f_eff = np.asarray(forms.volume_mass(forms.f, lumped=True).diagonal()) / m
    hv = np.nan_to_num(forms.h)
    bh = np.asarray(forms.boundary_mass(hv, lumped=True).diagonal())
    h_eff = np.zeros_like(b)
    on = b > 0
    h_eff[on] = bh[on] / b[on]
    return m, b, f_eff, h_eff


def interior_operator(forms: AssembledForms, v, flux) -> np.ndarray:
    m, b, f_eff, _ = nodal_coefficients(forms)
    fl = np.where(forms.nodes["boundary_m"], np.nan_to_num(flux), 0.0)
    return (forms.K @ v - b * fl) / m + f_eff * v


def boundary_operator(forms: AssembledForms, v, flux) -> np.ndarray:
    _, _, _, h_eff = nodal_coefficients(forms)
    out = np.full(forms.n, np.nan)
    bm = forms.nodes["boundary_m"]
    out[bm] = np.asarray(flux)[bm] + h_eff[bm] * v[bm]
    return out


def _require_lumped(forms: AssembledForms):
    if not forms.lumped:
        raise ValueError("pipelines work on lumped forms (assemble(..., lumped=True))")


def solve_linear_robin(forms: AssembledForms, weight, tol: float = 1e-10) -> LinearSolveReport:
    """Solve (K + M_f + B_h) u = B q for a boundary weight q > 0."""
    _require_lumped(forms)
    q = forms.as_dofs(weight.on(forms.mesh) if isinstance(weight, WeightSpec) else weight)
    bm = forms.nodes["boundary_m"]
    if np.any(q[bm] <= 0):
        raise DeformationError("boundary weight must be positive on BOUNDARY_M")
    rep = solve_constrained(forms.operator(), forms.boundary_load(q), tol=tol)
    u = rep.solution
    if np.any(u <= 0):
        raise DeformationError(f"nonpositive minimiser (min {u.min():.3e}); hypotheses fail")
    _, _, _, h_eff = nodal_coefficients(forms)
    flux = np.full(forms.n, np.nan)
    flux[bm] = q[bm] - h_eff[bm] * u[bm]
    rep.flux = flux
    return rep


def solve_linear_interior(forms: AssembledForms, weight, tol: float = 1e-10) -> LinearSolveReport:
    """Solve (K + M_f + B_h) u = M p for a volume weight p > 0."""
    _require_lumped(forms)
    p = forms.as_dofs(weight.on(forms.mesh) if isinstance(weight, WeightSpec) else weight)
    if np.any(p <= 0):
        raise DeformationError("volume weight must be positive")
    rep = solve_constrained(forms.operator(), forms.volume_load(p), tol=tol)
    u = rep.solution
    if np.any(u <= 0):
        raise DeformationError(f"nonpositive minimiser (min {u.min():.3e}); hypotheses fail")
    _, _, _, h_eff = nodal_coefficients(forms)
    bm = forms.nodes["boundary_m"]
    flux = np.full(forms.n, np.nan)
    flux[bm] = -h_eff[bm] * u[bm]
    rep.flux = flux
    return rep


def minimize_energy(forms: AssembledForms, load: np.ndarray, x0=None, gtol: float = 1e-12) -> np.ndarray:
    """Minimise J(v) = v.A.v - 2 load.v by a Newton-CG optimiser (no linear
    factorisation involved)."""
    A = forms.operator()
    scale = max(1.0, float(np.abs(load).max()))

    def fun(v):
        Av = A @ v
        return float(v @ Av - 2 * load @ v) / scale, 2 * (Av - load) / scale

    res = sopt.minimize(fun, np.zeros(forms.n) if x0 is None else x0, jac=True, method="trust-krylov",
                        hessp=lambda v, p: 2 * (A @ p) / scale, options={"gtol": gtol, "maxiter": 500})
    return res.x


# ---------------------------------------------------------------------------
# flattening

@dataclass
class FlatteningParams:
    alpha: float
    c: float
    N: np.ndarray  # dof mask
    v_inf: float
    kind: str
    estimate_margin: float  # min over N of the (corrected) estimate
    stated_estimate_margin: float  # same with the c^2 factor
    failing_node: int | None = None


@dataclass
class FlattenResult:
    w: np.ndarray
    flux: np.ndarray
    params: FlatteningParams
    certificates: dict
    interior: np.ndarray
    boundary: np.ndarray

    @property
    def ok(self) -> bool:
        return all(self.certificates.values())

    @property
    def bounds(self) -> tuple[float, float]:
        """Theoretical bounds (1 - exp(-c alpha), 1)."""
        return 1.0 - np.exp(-self.params.c * self.params.alpha), 1.0


def flatten(forms: AssembledForms, u, flux, kind: str = "boundary") -> FlattenResult:
    """w = 1 - exp(-c (u + alpha)) with certified nodal inequalities.

    ``kind="boundary"``: N = {h_eff < 0} on BOUNDARY_M, the boundary
    inequality is made strict.  ``kind="volume"``: N = {f_eff < 0}, the
    interior inequality is made strict.
    """
    _require_lumped(forms)
    u = forms.as_dofs(u)
    if np.any(u <= 0):
        raise ValueError("flatten needs a positive field")
    _, _, f_eff, h_eff = nodal_coefficients(forms)
    bm = forms.nodes["boundary_m"]
    flux = np.where(bm, np.nan_to_num(np.asarray(flux, dtype=float)), 0.0)
    Lu = interior_operator(forms, u, flux)
    Bu = np.where(bm, flux + h_eff * u, np.nan)
    if kind == "boundary":
        N = bm & (h_eff < 0)
        coef = h_eff
        X_u = Bu
    elif kind == "volume":
        N = f_eff < 0
        coef = f_eff
        X_u = Lu
    else:
        raise ValueError("kind must be 'boundary' or 'volume'")

    alpha = 0.0
    if N.any():
        base = float(u.min())
        for k in range(BISECTION_STEPS + 1):
            trial = base / 2.0**k
            if np.all(X_u[N] + coef[N] * trial > 0):
                alpha = trial
                break
        else:
            raise DeformationError("no admissible lift alpha among dyadic fractions of min u")
    v = u + alpha
    X_v = X_u + coef * alpha
    v_inf = float(v[N].max()) if N.any() else 0.0

    def margin(c, power=1):
        if not N.any():
            return np.inf
        return float(np.min(X_v[N] - 0.5 * c**power * v_inf**2 * np.exp(c * v_inf) * np.abs(coef[N])))

    failing = None
    if margin(1.0) > 0:
        c = 1.0
    else:
        lo, hi = 0.0, 1.0
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            if margin(mid) > 0:
                lo = mid
            else:
                hi = mid
        c = lo
        if c == 0.0:
            k = np.flatnonzero(N)[np.argmin(X_v[N] - 0.5 * hi * v_inf**2 * np.exp(hi * v_inf) * np.abs(coef[N]))]
            raise DeformationError(f"bisection for c exhausted {BISECTION_STEPS} steps; estimate fails at dof {k}")

    e = np.exp(-c * v)
    w = 1.0 - e
    flux_w = np.where(bm, c * e * flux, np.nan)
    Lw = interior_operator(forms, w, flux_w)
    Bw = np.where(bm, c * e * flux + h_eff * w, np.nan)
    scale = max(1.0, float(np.abs((forms.K @ w) / forms.mass_lumped).max()))
    lower = 1.0 - np.exp(-c * alpha)
    cert = {
        "interior_nonnegative": bool(np.all(Lw >= -CERT_TOL * scale)),
        "boundary_nonnegative": bool(np.all(Bw[bm] >= -CERT_TOL * scale)),
        "alpha_condition": bool(np.all(X_v[N] > 0)),
        "estimate": bool(margin(c) > 0),
        "taylor_bound": bool(np.all(np.exp(c * v[N]) - 1 - c * v[N]
                                    <= 0.5 * c**2 * v_inf**2 * np.exp(c * v_inf) * (1 + 1e-12))),
        "bounds": bool(0 <= lower and np.all(w > lower) and np.all(w < 1) and (alpha == 0 or lower > 0)),
    }
    if kind == "boundary":
        cert["boundary_strict"] = bool(np.all(Bw[bm] > 0))
    else:
        cert["interior_strict"] = bool(np.all(Lw > 0))
    params = FlatteningParams(alpha, c, N, v_inf, kind, margin(c), margin(c, 2), failing)
    return FlattenResult(w, flux_w, params, cert, Lw, Bw)


# ---------------------------------------------------------------------------
# first variation

@dataclass
class VariationResult:
    formula: float
    interior: float  # integral of <h, Ric> phi^2 dv
    boundary: float  # integral of <h, A> phi^2 dsigma
    c_n: float
    d_n: float
    finite_difference: float | None = None
    values: tuple = ()

    @property
    def corrected(self) -> float:
        """Same integrals with c_n on the boundary term.

        Varying the averaged mean curvature contributes d_n/(n-1) times the
        variation of the trace, i.e. 2 c_n times it, which halves to c_n.
        """
        return -self.c_n * (self.interior + self.boundary)

    def value(self, coefficient: str = "corrected") -> float:
        if coefficient not in ("corrected", "stated"):
            raise ValueError("coefficient must be 'corrected' or 'stated'")
        return self.corrected if coefficient == "corrected" else self.formula

    def relative_error(self, coefficient: str = "stated") -> float:
        if self.finite_difference is None:
            return float("nan")
        v = self.value(coefficient)
        return abs(v - self.finite_difference) / abs(v)


def first_variation(forms: AssembledForms, geom: GeometryData, pert: PerturbationSpec | np.ndarray,
                    label: str = "mu1", eig: EigenResult | None = None, check_gap: bool = True) -> VariationResult:
    """-c_n int <h,Ric> phi^2 dv - d_n int_{BOUNDARY_M} <h,A> phi^2 dsigma,
    with phi the first eigenfunction normalised by the problem's denominator.

    ``geom`` and ``pert`` are given on the vertices of ``forms.mesh``.
    """
    mesh = forms.mesh
    cc = conformal_constants(mesh.dim)
    if eig is None:
        eig = mu1(forms) if label == "mu1" else sigma1(forms)
    if check_gap and eig.gap < 1e-6:
        raise EigenError(f"eigenvalue gap {eig.gap:.2e} too small; first eigenvalue may cross")
    h = pert.h if isinstance(pert, PerturbationSpec) else np.asarray(pert)
    g = forms.metric
    phi2 = mesh.to_vertices(eig.eigenfunction) ** 2
    s_int = contract(g, h, geom.Ric) * phi2
    s_bdy = contract(g, h, geom.A) * phi2
    interior = float(forms.mass_lumped @ mesh.to_dofs(s_int))
    boundary = float(forms.boundary_lumped @ mesh.to_dofs(s_bdy))
    formula = -cc.c_n * interior - cc.d_n * boundary
    return VariationResult(formula, interior, boundary, cc.c_n, cc.d_n)


def first_variation_mu1(forms, geom, pert, eig=None) -> VariationResult:
    return first_variation(forms, geom, pert, "mu1", eig)


def first_variation_sigma1(forms, geom, pert, eig=None) -> VariationResult:
    return first_variation(forms, geom, pert, "sigma1", eig)


def eigen_at(model: ModelSpace, domain: SimplicialMesh, pert: PerturbationSpec | None, t: float,
             label: str = "mu1", lumped: bool = True):
    """First eigenvalue of a domain under g + t h (curvature by finite
    differences on the model chart, corrected by the exact curvature)."""
    cc = conformal_constants(model.dim)
    if pert is None or t == 0:
        g_t, geom_t = model.metric, model.geometry
    else:
        g_t, geom_t = perturb_metric(model.mesh, model.metric, pert, t, reference=model.geometry)
    sub_geom = geom_t.restrict(domain)
    forms = assemble(domain, g_t.restrict(domain), cc.c_n * sub_geom.R, cc.d_n * sub_geom.H, lumped=lumped)
    eig = mu1(forms) if label == "mu1" else sigma1(forms)
    return eig, forms, g_t, geom_t


def variation_check(model: ModelSpace, domain: SimplicialMesh, pert: PerturbationSpec,
                    label: str = "mu1", t: float = 1e-3, lumped: bool = True) -> VariationResult:
    """Formula value at t = 0 together with the central difference
    (lambda(g + t h) - lambda(g - t h)) / (2 t)."""
    eig0, forms0, _, geom0 = eigen_at(model, domain, None, 0.0, label, lumped)
    res = first_variation(forms0, geom0.restrict(domain), domain.restrict(pert.h), label, eig0)
    try:
        ep, _, _, _ = eigen_at(model, domain, pert, t, label, lumped)
        em, _, _, _ = eigen_at(model, domain, pert, -t, label, lumped)
    except MetricError as exc:
        raise DeformationError(f"probe t={t:g} leaves the metric cone") from exc
    res.finite_difference = (ep.value - em.value) / (2 * t)
    res.values = (em.value, eig0.value, ep.value)
    return res


# ---------------------------------------------------------------------------
# pipelines

@dataclass
class DeformationReport:
    route: str
    skipped_perturbation: bool
    t: float
    trace: list  # (t, eigenvalue) pairs of the line search
    u: np.ndarray  # final conformal factor (dofs of the last domain)
    bounds: tuple  # (c2, c1) nodal bounds, strict
    equivalence: tuple  # (c2^p_conf, c1^p_conf)
    R_new: np.ndarray
    H_new: np.ndarray
    certificates: dict
    flatten: FlattenResult | None = None
    weight: WeightSpec | None = None
    domain: SimplicialMesh | None = None
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.certificates.values())

    def record(self) -> dict:
        out = {
            "route": self.route,
            "skipped_perturbation": self.skipped_perturbation,
            "t": self.t,
            "c2": self.bounds[0],
            "c1": self.bounds[1],
            "ratio": self.bounds[1] / self.bounds[0],
            "equiv_lower": self.equivalence[0],
            "equiv_upper": self.equivalence[1],
            "min_R_new": float(np.nanmin(self.R_new)),
            "min_H_new": float(np.nanmin(self.H_new)) if np.any(~np.isnan(self.H_new)) else float("nan"),
        }
        out.update({f"cert_{k}": v for k, v in self.certificates.items()})
        out.update({k: v for k, v in self.details.items() if np.isscalar(v)})
        return out


def _interior_vertices(dom: SimplicialMesh) -> np.ndarray:
    mask = np.ones(dom.n_vertices, dtype=bool)
    mask[dom.facets.ravel()] = False
    return mask


def _seed_positive(model: ModelSpace, dom0: SimplicialMesh, tol: float) -> bool:
    R0 = dom0.restrict(model.geometry.R)
    H0 = dom0.restrict(model.geometry.H)
    bm = dom0.vertex_mask(dom0.node_classes()["boundary_m"])
    return bool(np.any(R0 > tol) or np.any(H0[bm] > tol))


def _check_nonnegative(model: ModelSpace, tol: float):
    geom = model.geometry
    if np.any(geom.R < -tol):
        raise DeformationError("hypothesis failure: scalar curvature is negative somewhere")
    Hb = geom.H[~np.isnan(geom.H)]
    if np.any(Hb < -tol):
        raise DeformationError("hypothesis failure: boundary is not mean convex")


def _line_search(model, dom0, pert, t0, budget, label):
    trace = []
    for k in range(budget):
        t = t0 / 2.0**k
        try:
            eig, _, g_t, geom_t = eigen_at(model, dom0, pert, t, label)
        except MetricError:
            trace.append((t, float("nan")))
            continue
        trace.append((t, eig.value))
        if eig.value > INDETERMINATE_TOL:
            half, _, _, _ = eigen_at(model, dom0, pert, t / 2, label)
            trace.append((t / 2, half.value))
            return t, g_t, geom_t, trace, half.value > INDETERMINATE_TOL
    raise DeformationError(f"no admissible t among {budget} dyadic fractions of {t0:g}")


def _finish_pipeline(route, model, ex, g_t, geom_t, kind, skipped, t, trace, tol, extra=None):
    cc = conformal_constants(model.dim)
    f_t = cc.c_n * geom_t.R
    h_t = cc.d_n * np.nan_to_num(geom_t.H)
    weight = build_weight(ex, g_t, f_t, h_t, kind)
    dom = ex.domains[-1]
    gd = geom_t.restrict(dom)
    forms = assemble(dom, g_t.restrict(dom), dom.restrict(f_t), dom.restrict(h_t), lumped=True)
    bm = forms.nodes["boundary_m"]
    sol = solve_linear_robin(forms, weight) if kind == "boundary" else solve_linear_interior(forms, weight)
    flat = flatten(forms, sol.solution, sol.flux, kind)
    w = flat.w
    # curvature seen by the discrete operators (lumped coefficients), and the
    # same quantity recomputed through the generic conformal-change formula
    R_new = cc.a_n * w ** (-cc.p_int) * flat.interior
    H_new = np.where(forms.nodes["boundary_m"], w ** (-cc.p_bdy) * flat.boundary / cc.d_n, np.nan)
    _, _, f_eff, h_eff = nodal_coefficients(forms)
    eff = GeometryData(dom.to_vertices(f_eff / cc.c_n), dom.to_vertices(np.where(bm, h_eff / cc.d_n, np.nan)),
                       gd.Ric, gd.A)
    R_chk, H_chk = curvatures_after_conformal(eff, w, forms, flux=flat.flux)
    agree = max(float(np.max(np.abs(R_chk - R_new) / np.maximum(np.abs(R_new), 1e-300))),
                float(np.nanmax(np.abs(H_chk - H_new) / np.maximum(np.abs(H_new), 1e-300), initial=0.0)))
    c2, c1 = float(w.min()) * (1 - 1e-9), float(w.max()) * (1 + 1e-9)
    cert = {f"flatten_{k}": v for k, v in flat.certificates.items()}
    if kind == "volume":
        cert["R_new_positive"] = bool(np.all(R_new > 0))
        cert["H_new_nonnegative"] = bool(np.all(H_new[bm] >= -tol))
    else:
        cert["H_new_positive"] = bool(np.all(H_new[bm] > 0))
        cert["R_new_nonnegative"] = bool(np.all(R_new >= -tol))
    cert["bounds"] = bool(0 < c2 < w.min() and w.max() < c1)
    details = {
        "alpha": flat.params.alpha,
        "c": flat.params.c,
        "n_dofs": forms.n,
        "seed_eigenvalue": float(weight.eigenvalues[0]),
        "recompute_rel_diff": agree,
    }
    h_geom = gd.H[dom.dof_vertex]
    minimal = bool(np.all(np.abs(np.nan_to_num(h_geom[bm])) <= tol))
    if kind == "volume" and minimal:
        flux_c = np.abs(flat.flux[bm])
        flux_r = np.abs(forms.normal_derivative(w)[bm])
        details["max_flux_consistent"] = float(flux_c.max(initial=0.0))
        details["max_flux_recovered"] = float(flux_r.max(initial=0.0))
        cert["minimal_boundary_preserved"] = bool(flux_c.max(initial=0.0) <= tol)
    if extra:
        details.update(extra)
    p = cc.p_conf
    return DeformationReport(route, skipped, t, trace, w, (c2, c1), (c2**p, c1**p), R_new, H_new, cert,
                             flat, weight, dom, details)


def _exhaustion(model: ModelSpace, levels) -> ExhaustionSequence:
    return levels if isinstance(levels, ExhaustionSequence) else build_exhaustion(model.mesh, levels)


def normalize_seed_volume(model: ModelSpace, ex: ExhaustionSequence) -> ModelSpace:
    """Rescale the metric so the seed domain has unit volume."""
    dom0 = ex.domains[0]
    vol = float(assemble(dom0, model.metric.restrict(dom0), lumped=True).mass_lumped.sum())
    return scaled_model(model, vol ** (-2.0 / model.dim))


def _ricci_route(model, ex, chi, t0, budget, tol, label):
    dom0 = ex.domains[0]
    if _seed_positive(model, dom0, tol):
        return True, 0.0, model.metric, model.geometry, [], None
    chi = np.asarray(chi, dtype=float)
    inside = np.zeros(model.mesh.n_vertices, dtype=bool)
    inside[dom0.parent_vertex[_interior_vertices(dom0)]] = True
    if np.any(chi[~inside] != 0):
        raise DeformationError("cutoff must be supported in the interior of the seed domain")
    try:
        pert = ricci_perturbation(model.geometry, chi, model.mesh)
    except ValueError as exc:
        raise DeformationError(f"hypothesis failure: {exc}") from exc
    t, g_t, geom_t, trace, stable = _line_search(model, dom0, pert, t0, budget, label)
    return False, t, g_t, geom_t, trace, stable


def deform_positive_scalar(model: ModelSpace, chi, levels, t0: float = 0.1, budget: int = 12,
                           tol: float = 1e-9, normalize_volume: bool = True) -> DeformationReport:
    """Metric with positive scalar curvature via the volume-normalised route."""
    _check_nonnegative(model, tol)
    ex = _exhaustion(model, levels)
    if normalize_volume:
        model = normalize_seed_volume(model, ex)
    skipped, t, g_t, geom_t, trace, stable = _ricci_route(model, ex, chi, t0, budget, tol, "mu1")
    rep = _finish_pipeline("positive_scalar", model, ex, g_t, geom_t, "volume", skipped, t, trace, tol)
    if stable is not None:
        rep.certificates["half_t_stable"] = bool(stable)
    return rep


def deform_mean_convex(model: ModelSpace, chi, levels, t0: float = 0.1, budget: int = 12,
                       tol: float = 1e-9, normalize_volume: bool = True) -> DeformationReport:
    """Metric with strictly mean convex boundary via the boundary-normalised route."""
    _check_nonnegative(model, tol)
    ex = _exhaustion(model, levels)
    if normalize_volume:
        model = normalize_seed_volume(model, ex)
    skipped, t, g_t, geom_t, trace, stable = _ricci_route(model, ex, chi, t0, budget, tol, "mu1")
    extra = {}
    if not skipped:
        cc = conformal_constants(model.dim)
        dom0 = ex.domains[0]
        g0 = geom_t.restrict(dom0)
        forms0 = assemble(dom0, g_t.restrict(dom0), cc.c_n * g0.R, cc.d_n * g0.H, lumped=True)
        extra["sigma1_at_t"] = sigma1(forms0).value
    rep = _finish_pipeline("mean_convex", model, ex, g_t, geom_t, "boundary", skipped, t, trace, tol, extra)
    if stable is not None:
        rep.certificates["half_t_stable"] = bool(stable)
    return rep


@dataclass
class EpsilonStep:
    eps: float
    value: float  # first variation used for the decision
    interior_term: float
    boundary_term: float


def increase_mean_pipeline(model: ModelSpace, chi, levels, eps_schedule=None, t0: float = 0.1,
                           budget: int = 12, tol: float = 1e-9, proceed: bool = True,
                           coefficient: str = "corrected"):
    """Shrink the collar width until the boundary-normalised first variation
    along -h (h the collar extension of A) is positive, then deform.

    ``coefficient`` picks the boundary constant of the variation formula
    (see :meth:`VariationResult.corrected`).  Returns ``(steps, report)``;
    ``report`` is None when ``proceed`` is off.
    """
    ex = _exhaustion(model, levels)
    dom0 = ex.domains[0]
    chi = np.asarray(chi, dtype=float)
    cc = conformal_constants(model.dim)
    eig0, forms0, _, _ = eigen_at(model, dom0, None, 0.0, "sigma1")
    geom0 = model.geometry.restrict(dom0)
    if eps_schedule is None:
        from .metric import boundary_distance

        depth = float(boundary_distance(model.mesh, model.metric)[0].max())
        eps_schedule = [depth / 2.0**k for k in range(9)]
    steps = []
    chosen = None
    for eps in eps_schedule:
        try:
            pert = second_fundamental_perturbation(model.geometry, model.mesh, model.metric, chi, eps)
        except ValueError as exc:
            raise DeformationError(f"hypothesis failure: {exc}") from exc
        var = first_variation(forms0, geom0, -dom0.restrict(pert.h), "sigma1", eig0)
        bcoef = cc.c_n if coefficient == "corrected" else cc.d_n
        value = var.value(coefficient)
        steps.append(EpsilonStep(eps, value, -cc.c_n * var.interior, -bcoef * var.boundary))
        if value > 0:
            chosen = pert
            break
    if chosen is None:
        raise DeformationError("collar width schedule exhausted without a positive first variation")
    if not proceed:
        return steps, None
    down = PerturbationSpec(h=-chosen.h, label="second_fundamental", chi=chi, eps=chosen.eps)
    trace = []
    for k in range(budget):
        t = t0 / 2.0**k
        try:
            eig, _, g_t, geom_t = eigen_at(model, dom0, down, t, "sigma1")
        except MetricError:
            continue
        trace.append((t, eig.value))
        if eig.value > max(eig0.value, 0.0) + INDETERMINATE_TOL:
            break
    else:
        raise DeformationError("no admissible t for the collar perturbation")
    rep = _finish_pipeline("increase_mean", model, ex, g_t, geom_t, "boundary", False, t, trace, tol,
                           {"eps": chosen.eps})
    return steps, rep
