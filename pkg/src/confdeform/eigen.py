"""Lowest eigenpairs of the boundary-normalised and volume-normalised pencils.

``sigma1``: (K + M_f + B_h) phi = sigma B phi, natural condition on cuts.
``mu1``: (K + M_f + B_h) phi = mu M phi.
``lambda1_dirichlet``: like ``sigma1`` with weight h - q and phi = 0 on cuts.

Boundary-normalised pencils have a singular right-hand side; they are reduced
to the BOUNDARY_M dofs by a Schur complement and solved densely there.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import AssembledForms

INDETERMINATE_TOL = 1e-7
POSITIVITY_TOL = 1e-10
LABELS = ("sigma1", "mu1", "lambda1_dirichlet")


class EigenError(RuntimeError):
    pass


@dataclass
class EigenResult:
    label: str
    value: float
    eigenfunction: np.ndarray  # per dof, normalised against the right-hand form
    residual: float
    normalization: float
    next_value: float = float("nan")
    indeterminate: bool = False

    @property
    def gap(self) -> float:
        return self.next_value - self.value

    def record(self, domain_id: str | int = 0) -> dict:
        return {
            "label": self.label,
            "value": self.value,
            "residual": self.residual,
            "normalization": self.normalization,
            "domain": domain_id,
            "indeterminate": self.indeterminate,
        }


def _finish(label, value, nxt, phi, A, B, free=None) -> EigenResult:
    norm = float(phi @ (B @ phi))
    if norm <= 0:
        raise EigenError("eigenvector has zero weight in the normalising form")
    phi = phi / np.sqrt(norm)
    k = int(np.argmax(np.abs(phi)))
    if phi[k] < 0:
        phi = -phi
    check = phi if free is None else phi[free]
    if check.min() < -POSITIVITY_TOL * np.abs(phi).max():
        raise EigenError(f"{label}: eigenfunction changes sign (min {check.min():.3e}); not a first eigenpair")
    res = float(np.linalg.norm(A @ phi - value * (B @ phi)) / np.linalg.norm(phi))
    return EigenResult(label, float(value), phi, res, float(phi @ (B @ phi)), float(nxt),
                       abs(value) < INDETERMINATE_TOL)


def _reduced_pencil(A: sp.csr_matrix, B: sp.csr_matrix, gamma: np.ndarray, inner: np.ndarray):
    """Schur complement of A onto ``gamma`` (eliminating ``inner``)."""
    Agg = A[gamma][:, gamma].toarray()
    Bgg = B[gamma][:, gamma].toarray()
    if inner.size == 0:
        return Agg, Bgg, None, None
    Aii = A[inner][:, inner].tocsc()
    Aig = A[inner][:, gamma]
    lu = symmetric_lu(Aii)
    if np.any(lu.U.diagonal() <= 0):
        raise EigenError("left form is indefinite on functions vanishing on BOUNDARY_M; "
                         "the quotient is unbounded below")
    X = lu.solve(Aig.toarray())
    S = Agg - Aig.T @ X
    return 0.5 * (S + S.T), Bgg, X, lu


def symmetric_lu(A):
    """LU without off-diagonal pivoting under a symmetric ordering, so the
    signs of U's diagonal give the inertia of a symmetric A."""
    return spla.splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                     options={"SymmetricMode": True})


def _boundary_problem(label: str, A, B, gamma: np.ndarray, inner: np.ndarray, n: int, free=None):
    if gamma.size == 0:
        raise EigenError(f"{label}: no free BOUNDARY_M dofs (right-hand form vanishes)")
    S, Bgg, X, _ = _reduced_pencil(A, B, gamma, inner)
    k = min(2, gamma.size)
    vals, vecs = sla.eigh(S, Bgg, subset_by_index=[0, k - 1])
    phi = np.zeros(n)
    phi[gamma] = vecs[:, 0]
    if X is not None:
        phi[inner] = -X @ vecs[:, 0]
    nxt = vals[1] if k > 1 else np.inf
    return _finish(label, vals[0], nxt, phi, A, B, free)


def sigma1(forms: AssembledForms) -> EigenResult:
    A = forms.operator()
    gamma = np.flatnonzero(forms.nodes["boundary_m"])
    inner = np.flatnonzero(~forms.nodes["boundary_m"])
    return _boundary_problem("sigma1", A, forms.B, gamma, inner, forms.n)


def lambda1_dirichlet(forms: AssembledForms, q) -> EigenResult:
    """Boundary-normalised pencil with weight h - q and phi = 0 on cut dofs."""
    q = np.nan_to_num(forms.as_dofs(q))
    hq = forms.as_dofs(np.nan_to_num(forms.h)) - q
    A = (forms.K + forms.M_f + forms.boundary_mass(hq)).tocsr()
    cut = forms.nodes["boundary_0"]
    free = ~cut
    if not free.any():
        raise EigenError("lambda1_dirichlet: all dofs are constrained")
    bm = forms.nodes["boundary_m"] & free
    gamma = np.flatnonzero(bm)
    inner = np.flatnonzero(free & ~bm)
    keep = np.flatnonzero(free)
    # work in the free subspace
    pos = np.full(forms.n, -1)
    pos[keep] = np.arange(keep.size)
    Af = A[keep][:, keep]
    Bf = forms.B[keep][:, keep]
    res = _boundary_problem("lambda1_dirichlet", Af, Bf, pos[gamma], pos[inner], keep.size)
    phi = np.zeros(forms.n)
    phi[keep] = res.eigenfunction
    res.eigenfunction = phi
    return res


def _gershgorin_low(A: sp.csr_matrix) -> float:
    d = A.diagonal()
    off = np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(d)
    return float(np.min(d - off))


def mu1(forms: AssembledForms) -> EigenResult:
    A = forms.operator()
    M = forms.M
    n = forms.n
    if n < 4:
        vals, vecs = sla.eigh(A.toarray(), M.toarray())
        return _finish("mu1", vals[0], vals[1] if n > 1 else np.inf, vecs[:, 0], A, M)
    m = forms.mass_lumped
    low = _gershgorin_low(A)
    bound = low / m.min() if low < 0 else low / m.max()
    scale = A.diagonal().sum() / m.sum()
    sigma = bound - 1e-2 * max(scale, 1e-12) - 1e-12
    vals, vecs = spla.eigsh(A, k=2, M=M, sigma=sigma, which="LM", tol=1e-13)
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    # one step of Rayleigh refinement against the exact pencil
    phi = vecs[:, 0]
    value = float(phi @ (A @ phi)) / float(phi @ (M @ phi))
    return _finish("mu1", value, vals[1], phi, A, M)


def rayleigh(forms: AssembledForms, v, label: str = "sigma1", q=None) -> float:
    """Quotient of the assembled forms for a nodal field."""
    if label not in LABELS:
        raise ValueError(f"unknown problem label {label!r}")
    v = forms.as_dofs(v)
    if label == "lambda1_dirichlet":
        hq = forms.as_dofs(np.nan_to_num(forms.h)) - np.nan_to_num(forms.as_dofs(0.0 if q is None else q))
        Bw = forms.boundary_mass(hq)
    else:
        Bw = forms.B_h
    num = float(v @ (forms.K @ v) + v @ (forms.M_f @ v) + v @ (Bw @ v))
    den = float(v @ ((forms.M if label == "mu1" else forms.B) @ v))
    if den <= 0:
        raise ZeroDivisionError("denominator form vanishes for this field")
    return num / den
