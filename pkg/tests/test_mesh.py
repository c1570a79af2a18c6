import numpy as np
import pytest

from whitefem.mesh import (
    Mesh,
    build_interval_mesh,
    build_rectangle_mesh,
    read_mesh,
    refine_uniform,
    write_mesh,
)


def test_interval_equispacing():
    m = build_interval_mesh(0.0, 1.0, 4)
    assert np.allclose(m.nodes.ravel(), [0.0, 0.25, 0.5, 0.75, 1.0])
    assert m.h == pytest.approx(0.25)
    assert m.n_elements == 4
    assert m.n_facets == 2


def test_interval_minimal_mesh():
    m = build_interval_mesh(0.0, 1.0, 1)
    assert m.n_nodes == 2
    assert m.n_elements == 1
    assert m.n_facets == 2


def test_interval_rejects_bad_input():
    with pytest.raises(ValueError):
        build_interval_mesh(1.0, 0.0, 4)
    with pytest.raises(ValueError):
        build_interval_mesh(0.0, 1.0, 0)


def test_rectangle_counts():
    m = build_rectangle_mesh(np.pi, np.pi, 2, 2)
    assert m.n_nodes == 9
    assert m.n_elements == 8
    assert m.n_facets == 8


def test_rectangle_unit_square_area():
    m = build_rectangle_mesh(1.0, 1.0, 1, 1)
    assert m.n_nodes == 4
    assert m.n_elements == 2
    assert m.element_measures().sum() == pytest.approx(1.0, abs=1e-15)


def test_rectangle_partition_of_domain():
    m = build_rectangle_mesh(np.pi, np.pi, 8, 8)
    assert m.element_measures().sum() == pytest.approx(np.pi**2, rel=1e-12)


def test_rectangle_rejects_bad_input():
    with pytest.raises(ValueError):
        build_rectangle_mesh(-1.0, 1.0, 2, 2)
    with pytest.raises(ValueError):
        build_rectangle_mesh(1.0, 1.0, 0, 2)


def test_refine_interval():
    m = build_interval_mesh(0.0, 1.0, 4)
    fine = refine_uniform(m)
    assert fine.n_elements == 8
    assert fine.h == pytest.approx(m.h / 2.0, rel=1e-14)


def test_refine_rectangle_counts_and_h():
    m = build_rectangle_mesh(np.pi, np.pi, 2, 2)
    fine = refine_uniform(m)
    assert fine.n_elements == 32
    assert fine.h == pytest.approx(m.h / 2.0, rel=1e-14)
    finer = refine_uniform(fine)
    assert finer.n_elements == 128


def test_refine_preserves_area():
    m = build_rectangle_mesh(np.pi, np.pi, 4, 4)
    for _ in range(2):
        m = refine_uniform(m)
        assert m.element_measures().sum() == pytest.approx(np.pi**2, rel=1e-12)


@pytest.mark.parametrize("levels", [0, 1, 2])
def test_boundary_nodes_lie_on_boundary(levels):
    m = build_rectangle_mesh(2.0, 3.0, 3, 2)
    for _ in range(levels):
        m = refine_uniform(m)
    pts = m.nodes[m.boundary_nodes()]
    on_edge = (
        (np.abs(pts[:, 0]) < 1e-12)
        | (np.abs(pts[:, 0] - 2.0) < 1e-12)
        | (np.abs(pts[:, 1]) < 1e-12)
        | (np.abs(pts[:, 1] - 3.0) < 1e-12)
    )
    assert on_edge.all()


def test_triangles_positive_area_everywhere():
    m = refine_uniform(build_rectangle_mesh(1.0, 2.0, 3, 5))
    assert (m.element_measures() > 0).all()


def test_mesh_validation_rejects_bad_indices():
    with pytest.raises(ValueError, match="out of range"):
        Mesh(1, [[0.0], [1.0]], [[0, 2]], [[0], [1]], [0, 1])


def test_mesh_validation_rejects_clockwise_triangle():
    with pytest.raises(ValueError, match="nonpositive measure"):
        Mesh(2, [[0, 0], [1, 0], [0, 1]], [[0, 2, 1]], [[0, 1], [1, 2], [2, 0]], [0, 0, 0])


def test_mesh_validation_rejects_wrong_boundary():
    # interior edge declared as boundary
    nodes = [[0, 0], [1, 0], [1, 1], [0, 1]]
    elements = [[0, 1, 2], [0, 2, 3]]
    with pytest.raises(ValueError, match="boundary"):
        Mesh(2, nodes, elements, [[0, 1], [1, 2], [2, 3], [3, 0], [0, 2]], [0, 1, 2, 3, 0])


def test_mesh_file_roundtrip_bit_identical(tmp_path):
    m = refine_uniform(build_rectangle_mesh(np.pi, np.e, 3, 2))
    p1 = tmp_path / "mesh.txt"
    write_mesh(m, p1)
    back = read_mesh(p1)
    assert np.array_equal(back.nodes, m.nodes)
    assert np.array_equal(back.elements, m.elements)
    assert np.array_equal(back.facet_nodes, m.facet_nodes)
    assert np.array_equal(back.facet_sides, m.facet_sides)
    p2 = tmp_path / "again.txt"
    write_mesh(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_mesh_file_roundtrip_1d(tmp_path):
    m = build_interval_mesh(-1.5, 2.5, 7)
    path = tmp_path / "line.txt"
    write_mesh(m, path)
    back = read_mesh(path)
    assert np.array_equal(back.nodes, m.nodes)
    assert back.dim == 1


def test_read_mesh_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("2 1 0\n")
    with pytest.raises(ValueError):
        read_mesh(path)
