import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from confdeform.assembly import AssemblyError, SolveError, assemble, solve_constrained
from confdeform.catalog import model_space


def interval(cells, faces_m=((0, "hi"),)):
    return model_space("flat_slab", n=1, resolution=[cells], extents=[(0.0, 1.0)], faces_m=list(faces_m))


def test_two_segment_stiffness():
    m = interval(2)
    K = assemble(m.mesh, m.metric).K.toarray()
    assert np.allclose(K, [[2, -2, 0], [-2, 4, -2], [0, -2, 2]])


def test_zero_coefficient_gives_zero_mass():
    m = model_space("flat_slab", n=3, resolution=[2, 2, 2])
    assert assemble(m.mesh, m.metric, 0.0, 0.0).M_f.nnz == 0 or not assemble(m.mesh, m.metric).M_f.toarray().any()


@pytest.mark.parametrize("lumped", [False, True])
def test_constants_volume_and_area(lumped):
    m = model_space("hyperbolic_horoball_collar", n=3, resolution=[3, 3, 3])
    forms = assemble(m.mesh, m.metric, 0.0, 0.0, lumped)
    one = np.ones(forms.n)
    assert abs(one @ forms.K @ one) < 1e-12
    # dx^2 / z^2 on [0,1]^2 x [1,2]: volume = int z^-3 dz = 3/8, horosphere z=1 has area 1
    assert abs(one @ forms.M @ one - 3 / 8) < 5e-2
    assert abs(one @ forms.B @ one - 1.0) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 3))
def test_mass_weights_are_linear(a, b):
    m = model_space("flat_slab", n=2, resolution=[3, 3])
    f = a + b * m.mesh.vertices[:, 0]
    F = assemble(m.mesh, m.metric, f, 0.0)
    G = assemble(m.mesh, m.metric, 1.0, 0.0)
    H = assemble(m.mesh, m.metric, m.mesh.vertices[:, 0], 0.0)
    assert np.allclose(F.M_f.toarray(), a * G.M_f.toarray() + b * H.M_f.toarray())


def test_missing_coefficient_rejected():
    m = model_space("flat_slab", n=2, resolution=[2, 2])
    with pytest.raises(AssemblyError):
        assemble(m.mesh, m.metric, np.full(m.mesh.n_vertices, np.nan), 0.0)


@pytest.mark.parametrize("cells", [8, 32, 128])
def test_interval_poisson_nodal_values(cells):
    # piecewise-linear solutions of -u'' = 1 are exact at the nodes in 1D
    m = interval(cells)
    forms = assemble(m.mesh, m.metric)
    ends = np.array([0, forms.n - 1])
    rep = solve_constrained(forms.K, forms.volume_load(1.0), (ends, np.zeros(2)))
    x = m.mesh.vertices[m.mesh.dof_vertex, 0]
    assert np.allclose(rep.solution, x * (1 - x) / 2, atol=1e-12)
    assert abs(rep.solution.max() - 1 / 8) < 1e-12


def test_singular_neumann_rejected():
    m = interval(8)
    forms = assemble(m.mesh, m.metric)
    with pytest.raises(SolveError):
        solve_constrained(forms.K, np.zeros(forms.n))


def test_shifted_operator_reproduces_constants():
    m = model_space("euclidean_ball_chart", n=3, resolution=[3, 3, 3])
    forms = assemble(m.mesh, m.metric)
    rep = solve_constrained((forms.K + forms.M).tocsr(), forms.volume_load(1.0))
    assert np.allclose(rep.solution, 1.0, atol=1e-10)
    assert rep.residual < 1e-12


def test_dirichlet_values_imposed():
    m = interval(16)
    forms = assemble(m.mesh, m.metric)
    rep = solve_constrained(forms.K, np.zeros(forms.n), (np.array([0, forms.n - 1]), np.array([1.0, 3.0])))
    x = m.mesh.vertices[m.mesh.dof_vertex, 0]
    assert np.allclose(rep.solution, 1 + 2 * x)
