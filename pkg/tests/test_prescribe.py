import csv

import numpy as np
import pytest

from confdeform.assembly import assemble
from confdeform.catalog import model_space
from confdeform.mesh import build_exhaustion
from confdeform.metric import conformal_constants
from confdeform.prescribe import (
    PrescriptionError,
    bound_check,
    cap_is_barrier,
    completeness_check,
    compute_bounds,
    exhaustion_solve,
    hop_distance,
    monotone_solve,
    verify_prescription,
)


def everything(c):
    return np.ones(len(c), dtype=bool)


def chart():
    # R = -6, totally geodesic face x2 = 0
    return model_space("hyperbolic_halfspace_geodesic", n=3, resolution=[16, 2, 8],
                       extents=[(-2, 2), (0, 0.5), (0, 2)], periodic=[False, True, False], faces_m=[(2, "lo")])


def compact_X(mesh):
    c = mesh.cell_centroids()
    return np.flatnonzero((np.abs(c[:, 0]) < 0.5) & (c[:, 2] < 0.5))


def setup(m):
    forms = assemble(m.mesh, m.metric, 0.0, 0.0, lumped=True)
    return forms, m.mesh.vertex_mask(forms.nodes["boundary_m"])


def test_bounds_examples():
    m = chart()
    _, bm = setup(m)
    b = compute_bounds(m.geometry.R, 0.0, m.geometry, 3, boundary=bm)
    assert np.isclose(b.u_minus, 0.99) and np.isclose(b.u_plus, 1.01)
    b = compute_bounds(-96.0, 0.0, m.geometry, 3, boundary=bm)
    # (6 / 96)^(1/4) = 1/2
    assert np.isclose(b.u_minus, 0.495) and np.isclose(b.u_plus, 1.01)
    assert b.contains(np.array([0.495, 1.0, 1.01])).all() and not b.contains(np.array([0.49])).any()


def test_bounds_reject_bad_data():
    m = chart()
    _, bm = setup(m)
    with pytest.raises(PrescriptionError):
        compute_bounds(1.0, 0.0, m.geometry, 3, boundary=bm)
    with pytest.raises(PrescriptionError):
        compute_bounds(-6.0, 0.5, m.geometry, 3, boundary=bm)
    flat = model_space("flat_slab", n=3, resolution=[2, 2, 2])
    with pytest.raises(PrescriptionError):
        compute_bounds(-1.0, 0.0, flat.geometry, 3)


def test_boundary_case_constants_cannot_bracket_one():
    # constant barriers need sup(H/h) <= u-^2 <= 1 <= u+^2 <= inf(H/h)
    m = model_space("hyperbolic_horoball_collar", n=3, resolution=[4, 4, 4])
    H = np.nan_to_num(m.geometry.H)
    for scale in (0.5, 1.0, 2.0):
        with pytest.raises(PrescriptionError):
            compute_bounds(-6.0, scale * H, m.geometry, 3, "b")


def test_cap_barrier_kinds():
    R = np.full(4, -6.0)
    assert cap_is_barrier(R, R, np.zeros(2), np.zeros(2)) == "both"
    assert cap_is_barrier(np.full(4, -96.0), R, np.zeros(2), np.zeros(2)) == "super"
    assert cap_is_barrier(np.full(4, -1.0), R, np.zeros(2), np.zeros(2)) == "sub"


def test_lower_and_upper_starts_bracket():
    m = chart()
    forms, bm = setup(m)
    b = compute_bounds(-96.0, 0.0, m.geometry, 3, boundary=bm)
    lo, tr_lo = monotone_solve(forms, -96.0, 0.0, m.geometry, b, start="lower", tol=1e-10)
    hi, tr_hi = monotone_solve(forms, -96.0, 0.0, m.geometry, b, start="upper", tol=1e-10)
    assert np.all(lo <= hi + 1e-12)
    assert all(tr_lo.monotone) and all(tr_hi.monotone)
    assert tr_lo.sandwich_violations == 0 == tr_hi.sandwich_violations
    assert np.all(np.diff(tr_lo.minima) >= -1e-12) and np.all(np.diff(tr_hi.maxima) <= 1e-12)
    assert np.all(lo[forms.nodes["boundary_0"]] == 1.0)


@pytest.mark.parametrize("f", ["R", -20.0])
def test_lower_start_monotone_with_mild_data(f):
    # small shifts: the right-hand side must still be nondecreasing in u
    m = chart()
    forms, bm = setup(m)
    f = m.geometry.R if f == "R" else f
    b = compute_bounds(f, 0.0, m.geometry, 3, boundary=bm)
    u, tr = monotone_solve(forms, f, 0.0, m.geometry, b, start="lower", tol=1e-10)
    assert all(tr.monotone) and tr.restarts == 0
    p = conformal_constants(3).p_int
    ends = np.array([b.u_minus, b.u_plus])
    assert np.all(p * np.min(np.broadcast_to(f, m.geometry.R.shape)) * ends ** (p - 1) + tr.shift >= 0)


def test_two_sided_agreement_on_anchor_seed_domain():
    # seed domain of the anchored-limit scenario, terminated at sup-increment <= tol
    m = model_space("hyperbolic_halfspace_geodesic", n=3, resolution=[88, 2, 44],
                    extents=[(-11, 11), (0, 0.5), (0, 11)], periodic=[False, True, False], faces_m=[(2, "lo")])
    dom = build_exhaustion(m.mesh, [lambda c: (np.abs(c[:, 0]) < 4) & (c[:, 2] < 4)]).domains[0]
    gd = m.geometry.restrict(dom)
    forms = assemble(dom, m.metric.restrict(dom), 0.0, 0.0, lumped=True)
    b = compute_bounds(-96.0, 0.0, gd, 3, boundary=dom.vertex_mask(forms.nodes["boundary_m"]))
    tol = 1e-10
    lo, _ = monotone_solve(forms, -96.0, 0.0, gd, b, start="lower", tol=tol)
    hi, _ = monotone_solve(forms, -96.0, 0.0, gd, b, start="upper", tol=tol)
    assert np.abs(hi - lo).max() <= 10 * tol


def test_trace_csv(tmp_path):
    m = chart()
    forms, bm = setup(m)
    b = compute_bounds(-96.0, 0.0, m.geometry, 3, boundary=bm)
    _, tr = monotone_solve(forms, -96.0, 0.0, m.geometry, b, tol=1e-8, store_iterates=True)
    path = tmp_path / "trace.csv"
    tr.to_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == tr.iterations == len(tr.iterates)
    assert set(rows[0]) == {"iterate", "sup_increment", "min", "max", "monotone", "sandwich"}


def test_single_domain_exhaustion():
    m = chart()
    ex = build_exhaustion(m.mesh, [everything])
    sol = exhaustion_solve(ex, m.metric, m.geometry.R, 0.0, m.geometry, compact_X(m.mesh), start="cap")
    assert sol.differences == [] and len(sol.solutions) == 1
    check = bound_check(sol)
    assert np.allclose(check["maxima"], 1.0) and not any(check["alarm"])


def test_exhaustion_csv_and_bounds(tmp_path):
    m = chart()
    levels = [lambda c: (np.abs(c[:, 0]) < 1) & (c[:, 2] < 1), everything]
    sol = exhaustion_solve(build_exhaustion(m.mesh, levels), m.metric, -96.0, 0.0, m.geometry,
                           compact_X(m.mesh), tol=1e-9)
    assert len(sol.differences) == 1
    check = bound_check(sol)
    assert all(check["within_upper"])
    sol.to_csv(tmp_path / "ex.csv")
    rows = list(csv.DictReader(open(tmp_path / "ex.csv")))
    assert [int(r["domain"]) for r in rows] == [0, 1]


def test_compact_outside_seed_rejected():
    m = chart()
    levels = [lambda c: (np.abs(c[:, 0]) < 1) & (c[:, 2] < 1), everything]
    far = np.flatnonzero(m.mesh.cell_centroids()[:, 2] > 1.5)
    with pytest.raises(PrescriptionError):
        exhaustion_solve(build_exhaustion(m.mesh, levels), m.metric, -96.0, 0.0, m.geometry, far)


def test_verify_constant_factors():
    m = chart()
    forms, _ = setup(m)
    one = np.ones(forms.n)
    rep = verify_prescription(one, m.geometry.R, 0.0, m.geometry, forms)
    assert rep.interior < 1e-9 and rep.boundary < 1e-9 and rep.n_interior > 0
    # constant 1/2: R_new = 2^5 (-6 / 2) = -96
    rep = verify_prescription(0.5 * one, -96.0, 0.0, m.geometry, forms)
    assert rep.interior < 1e-9
    with pytest.raises(PrescriptionError):
        verify_prescription(-one, -96.0, 0.0, m.geometry, forms)


def test_hop_distance_on_line():
    m = model_space("flat_slab", n=1, resolution=[5], extents=[(0.0, 1.0)], faces_m=[(0, "hi")])
    src = np.zeros(m.mesh.n_dofs, dtype=bool)
    src[0] = True
    d = hop_distance(m.mesh, src)
    x = m.mesh.vertices[m.mesh.dof_vertex, 0]
    assert np.allclose(d, np.rint(5 * np.abs(x - x[0])))


@pytest.mark.parametrize("value, ratio", [(1.0, 1.0), (2.0, 4.0)])
def test_completeness_constant_scaling(value, ratio):
    m = chart()
    u = np.full(m.mesh.n_vertices, value)
    rep = completeness_check(m.mesh, m.metric, u, n_pairs=30)
    assert np.allclose(rep.ratios, ratio) and rep.ok


def test_completeness_rejects_uncertified_bound():
    m = chart()
    with pytest.raises(PrescriptionError):
        completeness_check(m.mesh, m.metric, np.full(m.mesh.n_vertices, 0.5), c2=0.6)
