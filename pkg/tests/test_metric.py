import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confdeform.assembly import assemble
from confdeform.catalog import model_space, scaled_model
from confdeform.fd import curvature_from_metric
from confdeform.metric import (
    MetricError,
    PerturbationSpec,
    conformal_constants,
    contract,
    curvatures_after_conformal,
    perturb_metric,
    ricci_perturbation,
    second_fundamental_perturbation,
)


def bump(s, c, r, k=4):
    return np.clip(1 - ((s - c) / r) ** 2, 0, None) ** k


def test_flat_slab_is_flat():
    m = model_space("flat_slab", n=3, resolution=[3, 3, 3])
    assert np.all(m.geometry.R == 0)
    assert np.nanmax(np.abs(m.geometry.H)) == 0


def test_hyperbolic_scalar_curvature():
    m = model_space("hyperbolic_halfspace_geodesic", n=3, resolution=[3, 3, 3])
    assert np.allclose(m.geometry.R, -6.0)


def test_fd_scalar_curvature_of_hyperbolic_chart():
    # 64^3 is the reference grid; the worst error sits at the box corners
    m = model_space("hyperbolic_halfspace_geodesic", n=3, resolution=[64, 64, 64])
    R, H, _, _ = curvature_from_metric(m.mesh, m.metric.components)
    assert np.max(np.abs(R + 6.0)) / 6.0 <= 1e-4
    assert np.nanmax(np.abs(H)) < 1e-8


def test_horosphere_mean_curvature_matches_fd():
    errs = []
    for k in (16, 32):
        m = model_space("hyperbolic_horoball_collar", n=3, resolution=[k, k, k])
        H = m.geometry.H[~np.isnan(m.geometry.H)]
        assert np.ptp(H) < 1e-12 and H[0] > 0
        _, H_fd, _, _ = curvature_from_metric(m.mesh, m.metric.components)
        on = ~np.isnan(m.geometry.H)
        errs.append(np.max(np.abs(H_fd[on] - m.geometry.H[on])))
    assert errs[1] < errs[0] and errs[1] < 1e-4


def test_conformal_constants_n3_n4():
    c3 = conformal_constants(3)
    assert (c3.c_n, c3.d_n, c3.p_int, c3.p_bdy, c3.p_conf) == (1 / 8, 1 / 2, 5, 3, 4)
    c4 = conformal_constants(4)
    assert (c4.a_n, c4.c_n, c4.p_int, c4.p_bdy, c4.p_conf) == (6, 1 / 6, 3, 2, 2)
    with pytest.raises(ValueError):
        conformal_constants(2)


@given(st.integers(3, 40))
def test_an_cn_product(n):
    cc = conformal_constants(n)
    assert abs(cc.a_n * cc.c_n - 1) < 1e-15


def _forms(m):
    return assemble(m.mesh, m.metric, 0.0, 0.0, lumped=True)


def test_constant_factor_rescales_curvature():
    m = model_space("hyperbolic_horoball_collar", n=3, resolution=[3, 3, 3])
    forms = _forms(m)
    R, H = curvatures_after_conformal(m.geometry, 2.0, forms)
    bm = forms.nodes["boundary_m"]
    rep = m.mesh.dof_vertex
    assert np.allclose(R, m.geometry.R[rep] / 16)
    assert np.allclose(H[bm], m.geometry.H[rep][bm] / 4)
    R1, H1 = curvatures_after_conformal(m.geometry, 1.0, forms)
    assert np.allclose(R1, m.geometry.R[rep]) and np.allclose(H1[bm], m.geometry.H[rep][bm])


def test_half_factor_on_hyperbolic_chart():
    m = model_space("hyperbolic_halfspace_geodesic", n=3, resolution=[3, 3, 3])
    R, H = curvatures_after_conformal(m.geometry, 0.5, _forms(m))
    assert np.allclose(R, -96.0)
    assert np.allclose(H[~np.isnan(H)], 0.0)


def test_scaled_model_follows_fd_scaling():
    base = model_space("hyperbolic_horoball_collar", n=3, resolution=[8, 8, 8])
    m = scaled_model(base, 4.0)
    R0, H0, _, A0 = curvature_from_metric(base.mesh, base.metric.components)
    R, H, _, A = curvature_from_metric(m.mesh, m.metric.components)
    on = ~np.isnan(m.geometry.H)
    assert np.allclose(R, R0 / 4, rtol=1e-12) and np.allclose(H[on], H0[on] / 2, rtol=1e-12)
    assert np.allclose(m.geometry.R, base.geometry.R / 4)
    assert np.allclose(m.geometry.H[on], base.geometry.H[on] / 2)
    assert np.allclose(m.geometry.A, 2 * base.geometry.A) and np.allclose(A, 2 * A0)


def test_ricci_perturbation_flat_is_degenerate():
    m = model_space("flat_slab", n=3, resolution=[4, 4, 4])
    chi = bump(m.mesh.vertices[:, 0], 0.5, 0.3)
    with pytest.raises(ValueError):
        ricci_perturbation(m.geometry, chi, m.mesh)


def test_ricci_perturbation_sign_and_integral():
    m = model_space("hyperbolic_halfspace_geodesic", n=3, resolution=[8, 2, 8],
                    extents=[(-1, 1), (0, 0.5), (0, 2)], periodic=[False, True, False])
    x = m.mesh.vertices
    chi = bump(x[:, 0], 0.0, 0.6) * bump(x[:, 2], 1.0, 0.6)
    pert = ricci_perturbation(m.geometry, chi, m.mesh)
    inner = contract(m.metric, pert.h, m.geometry.Ric)
    ric2 = contract(m.metric, m.geometry.Ric, m.geometry.Ric)
    assert np.all(inner <= 1e-14)
    assert np.allclose(inner, -chi * ric2)
    forms = assemble(m.mesh, m.metric, 0.0, 0.0)
    a = forms.volume_load(m.mesh.to_dofs(inner)).sum()
    b = -forms.M @ forms.as_dofs(chi * ric2)
    assert abs(a - b.sum()) <= 1e-10


def test_second_fundamental_perturbation():
    geo = model_space("hyperbolic_halfspace_geodesic", n=3, resolution=[4, 4, 4])
    with pytest.raises(ValueError):
        second_fundamental_perturbation(geo.geometry, geo.mesh, geo.metric, np.ones(geo.mesh.n_vertices), 0.5)
    m = model_space("hyperbolic_horoball_collar", n=3, resolution=[8, 8, 8])
    x = m.mesh.vertices
    chi = bump(x[:, 0], 0.5, 0.45) * bump(x[:, 1], 0.5, 0.45)
    sizes = []
    for eps in (0.5, 0.25, 0.125):
        pert = second_fundamental_perturbation(m.geometry, m.mesh, m.metric, chi, eps)
        sizes.append(int(pert.support().sum()))
    assert sizes[0] > sizes[1] > sizes[2] > 0
    forms = assemble(m.mesh, m.metric, 0.0, 0.0)
    hA = np.nan_to_num(contract(m.metric, pert.h, m.geometry.A))
    term = -conformal_constants(3).d_n * forms.boundary_load(hA).sum()
    assert term < 0


def test_perturb_metric_identity_at_zero():
    m = model_space("hyperbolic_halfspace_geodesic", n=3, resolution=[6, 6, 6])
    x = m.mesh.vertices
    chi = bump(x[:, 0], 0, 0.8) * bump(x[:, 1], 0, 0.8) * bump(x[:, 2], 0.5, 0.4)
    pert = ricci_perturbation(m.geometry, chi, m.mesh)
    g0, geom0 = perturb_metric(m.mesh, m.metric, pert, 0.0, reference=m.geometry)
    assert np.array_equal(g0.components, m.metric.components)
    assert np.allclose(geom0.R, m.geometry.R, atol=1e-8)


def test_interior_perturbation_keeps_boundary_curvature():
    # support 6 cells away from the boundary, beyond the stencil reach
    m = model_space("flat_slab", n=3, resolution=[20, 20, 20])
    x = m.mesh.vertices
    chi = bump(x[:, 0], 0.5, 0.2) * bump(x[:, 1], 0.5, 0.2) * bump(x[:, 2], 0.5, 0.2)
    pert = PerturbationSpec(h=chi[:, None, None] * np.eye(3)[None], label="custom")
    _, geom = perturb_metric(m.mesh, m.metric, pert, 0.1, reference=m.geometry)
    on = ~np.isnan(m.geometry.H)
    assert np.allclose(geom.H[on], m.geometry.H[on], atol=1e-12)


def test_non_positive_metric_rejected():
    m = model_space("flat_slab", n=3, resolution=[3, 3, 3])
    pert = PerturbationSpec(h=np.broadcast_to(np.eye(3), (m.mesh.n_vertices, 3, 3)).copy(), label="custom")
    with pytest.raises(MetricError):
        perturb_metric(m.mesh, m.metric, pert, -2.0)
