import numpy as np
import pytest
from hypothesis import given, strategies as st

from confdeform import io
from confdeform.catalog import model_space


def test_mesh_round_trip(tmp_path):
    m = model_space("hyperbolic_halfspace_geodesic", n=3, resolution=[4, 2, 3],
                    periodic=[False, True, False], faces_m=[(2, "lo")])
    path = tmp_path / "mesh.txt"
    io.write_mesh(path, m.mesh)
    back = io.read_mesh(path)
    assert np.array_equal(back.vertices, m.mesh.vertices)
    assert np.array_equal(back.cells, m.mesh.cells)
    assert np.array_equal(back.facets, m.mesh.facets)
    assert np.array_equal(back.facet_tags, m.mesh.facet_tags)
    assert np.array_equal(back.facet_cell, m.mesh.facet_cell)
    assert np.array_equal(back.dof_of_vertex, m.mesh.dof_of_vertex)


def test_geometry_round_trip(tmp_path):
    m = model_space("hyperbolic_horoball_collar", n=3, resolution=[3, 3, 3])
    path = tmp_path / "geom.txt"
    io.write_geometry(path, m.mesh, m.metric, m.geometry)
    _, g, geom = io.read_geometry(path)
    assert np.array_equal(g.components, m.metric.components)
    assert np.array_equal(geom.R, m.geometry.R)
    assert np.array_equal(np.isnan(geom.H), np.isnan(m.geometry.H))
    on = ~np.isnan(geom.H)
    assert np.array_equal(geom.H[on], m.geometry.H[on])
    assert np.array_equal(geom.Ric, m.geometry.Ric)
    assert np.array_equal(geom.A[on], m.geometry.A[on])


@pytest.mark.parametrize("text, message", [
    ("1 2 3\n", "before any section"),
    ("VERTICES\n0 0.0\nCELLS\n0 1\n", "missing section BOUNDARY"),
    ("VERTICES\n0 0.0\n1 1.0\nCELLS\n0 5\nBOUNDARY\n", "missing vertex"),
    ("VERTICES\n0 0.0\n2 1.0\nCELLS\n0 1\nBOUNDARY\n", "out of order"),
    ("VERTICES\n0 0.0\n1 1.0\nCELLS\n0 1\nBOUNDARY\n0 wall\n", "BOUNDARY expects"),
    ("VERTICES\n0 x\nCELLS\nBOUNDARY\n", "VERTICES"),
    ("VERTICES\n0 0.0\nVERTICES\n", "duplicate section"),
])
def test_malformed_mesh_text(text, message):
    with pytest.raises(io.FormatError, match=message):
        io.mesh_from_text(text)


def test_geometry_needs_all_sections():
    m = model_space("flat_slab", n=2, resolution=[2, 2])
    text = io.geometry_to_text(m.mesh, m.metric, m.geometry)
    with pytest.raises(io.FormatError, match="RICCI"):
        io.geometry_from_text(text.replace("RICCI", "# RICCI"))


def test_record_examples():
    rec = {"kind": "verdict", "name": "two words", "pass": True, "value": 0.25, "count": 3}
    line = io.format_record(rec)
    assert line == 'kind=verdict name="two words" pass=true value=0.25 count=3'
    assert io.parse_record(line) == rec
    with pytest.raises(io.FormatError):
        io.format_record({"bad key": 1})
    with pytest.raises(io.FormatError):
        io.parse_record('a="open')


keys = st.text(alphabet="abcdefghijklmnopqrstuvwxyz_", min_size=1, max_size=8)
values = st.one_of(
    st.booleans(),
    st.integers(-10**9, 10**9),
    st.floats(allow_nan=False, allow_infinity=False),
    st.text(alphabet="abc12 XYZ=\\\"-_.e", max_size=12),
    st.sampled_from(["true", "false", "1", "2.5", "nan", "inf", ""]),
)


@given(st.dictionaries(keys, values, max_size=6))
def test_record_round_trip(rec):
    assert io.parse_record(io.format_record(rec)) == rec


def test_csv_union_of_keys(tmp_path):
    path = tmp_path / "t.csv"
    io.write_csv(path, [{"a": 1}, {"a": 2, "b": 3}])
    assert path.read_text().splitlines() == ["a,b", "1,", "2,3"]
