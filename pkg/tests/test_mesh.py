import numpy as np
import pytest

from thermodamage.errors import ConfigurationError, MeshParseError, MeshValidationError
from thermodamage.mesh import DIRICHLET, NEUMANN, SIDES, DofMap, Mesh2D, generate_unit_square, load_mesh, write_mesh

TWO_TRIANGLES = """\
# unit square split along the diagonal
NODES 4
0 0 0
1 1 0
2 1 1
3 0 1
TRIANGLES 2
0 0 1 2
1 0 2 3
BOUNDARY 4
0 0 1 NEUMANN
1 1 2 NEUMANN
2 2 3 NEUMANN
3 3 0 DIRICHLET
"""


def _write(tmp_path, text, name="m.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_smallest_square():
    m = generate_unit_square(1, ["left"])
    assert (m.n_nodes, m.n_triangles, len(m.boundary_edges)) == (4, 2, 4)
    assert m.labels.count(DIRICHLET) == 1


def test_all_sides_dirichlet():
    m = generate_unit_square(2, SIDES)
    assert (m.n_nodes, m.n_triangles) == (9, 8)
    assert m.labels.count(DIRICHLET) == 8
    assert len(DofMap.from_mesh(m).free) == 2


@pytest.mark.parametrize("n", [1, 3, 16])
def test_area_partition(n):
    m = generate_unit_square(n, ["left", "right"])
    assert m.n_triangles == 2 * n * n
    assert abs(m.areas.sum() - 1.0) <= 1e-12
    assert np.all(m.areas > 0)


@pytest.mark.parametrize("n", [1, 2, 5])
def test_normals_unit_and_outward(n):
    m = generate_unit_square(n, ["bottom"])
    assert np.allclose(np.linalg.norm(m.normals, axis=1), 1.0, atol=1e-14)
    for (a, b), nrm in zip(m.boundary_edges, m.normals):
        mid = 0.5 * (m.nodes[a] + m.nodes[b])
        # the opposite vertex lies inside the square, so the centre does too
        assert np.dot(nrm, np.array([0.5, 0.5]) - mid) < 0


def test_side_tags_match_geometry():
    m = generate_unit_square(3, ["top"])
    expect = {"left": (-1, 0), "right": (1, 0), "bottom": (0, -1), "top": (0, 1)}
    for side, nrm in zip(m.edge_sides, m.normals):
        assert np.allclose(nrm, expect[side])
    assert all((lab == DIRICHLET) == (s == "top") for lab, s in zip(m.labels, m.edge_sides))


def test_boundary_length_is_perimeter():
    m = generate_unit_square(7, ["left"])
    assert m.edge_lengths.sum() == pytest.approx(4.0, abs=1e-13)


@pytest.mark.parametrize("bad", [[], ["north"]])
def test_bad_sides(bad):
    with pytest.raises(ConfigurationError):
        generate_unit_square(2, bad)


@pytest.mark.parametrize("n", [0, -1, 2.5])
def test_bad_n(n):
    with pytest.raises(ConfigurationError):
        generate_unit_square(n, ["left"])


def test_dofmap_partition_and_round_trip():
    m = generate_unit_square(4, ["left", "bottom"])
    d = DofMap.from_mesh(m)
    assert np.array_equal(np.union1d(d.free, d.constrained), np.arange(d.n_vector))
    assert np.intersect1d(d.free, d.constrained).size == 0
    on_d = np.unique(m.boundary_edges[m.dirichlet_mask].ravel())
    assert np.array_equal(d.constrained_nodes, on_d)
    k = np.arange(d.n_vector)
    node, comp = d.node_of(k)
    assert np.array_equal(d.vector_dof(node, comp), k)
    assert np.array_equal(d.scalar_dof(np.arange(m.n_nodes)), np.arange(m.n_nodes))


def test_dofmap_expand():
    m = generate_unit_square(2, ["left"])
    d = DofMap.from_mesh(m)
    u = d.expand(np.arange(len(d.free), dtype=float) + 1.0)
    assert np.all(u[d.constrained] == 0.0)
    assert np.all(u[d.free] > 0.0)


def test_mesh_is_immutable():
    m = generate_unit_square(2, ["left"])
    with pytest.raises(ValueError):
        m.nodes[0, 0] = 5.0


def test_load_two_triangles(tmp_path):
    m = load_mesh(_write(tmp_path, TWO_TRIANGLES))
    assert m.n_triangles == 2
    assert m.labels == (NEUMANN, NEUMANN, NEUMANN, DIRICHLET)
    assert m.areas.sum() == pytest.approx(1.0, abs=1e-15)


def test_write_load_round_trip(tmp_path):
    m = generate_unit_square(3, ["left", "top"])
    p = tmp_path / "sq.txt"
    write_mesh(m, p)
    back = load_mesh(p)
    assert np.array_equal(back.nodes, m.nodes)
    assert np.array_equal(back.triangles, m.triangles)
    assert np.array_equal(back.boundary_edges, m.boundary_edges)
    assert back.labels == m.labels


def test_clockwise_triangle_named(tmp_path):
    text = TWO_TRIANGLES.replace("1 0 2 3\n", "1 0 3 2\n")
    with pytest.raises(MeshValidationError, match="triangle 1"):
        load_mesh(_write(tmp_path, text))


def test_clockwise_triangle_repaired(tmp_path, caplog):
    text = TWO_TRIANGLES.replace("1 0 2 3\n", "1 0 3 2\n")
    m = load_mesh(_write(tmp_path, text), repair_orientation=True)
    assert np.all(m.areas > 0)
    assert "clockwise" in caplog.text


def test_unlabeled_edge(tmp_path):
    text = TWO_TRIANGLES.replace("2 2 3 NEUMANN", "2 2 3")
    with pytest.raises(MeshValidationError, match="no label"):
        load_mesh(_write(tmp_path, text))


def test_missing_boundary_edge(tmp_path):
    text = TWO_TRIANGLES.replace("BOUNDARY 4", "BOUNDARY 3").replace("3 3 0 DIRICHLET\n", "")
    text = text.replace("2 2 3 NEUMANN", "2 2 3 DIRICHLET")
    with pytest.raises(MeshValidationError, match="no label"):
        load_mesh(_write(tmp_path, text))


def test_empty_dirichlet_set(tmp_path):
    text = TWO_TRIANGLES.replace("DIRICHLET", "NEUMANN")
    with pytest.raises(MeshValidationError, match="Dirichlet"):
        load_mesh(_write(tmp_path, text))


@pytest.mark.parametrize("mutate", [
    lambda s: s.replace("NODES 4", "NODES four"),
    lambda s: s.replace("1 1 0\n", "1 1\n"),
    lambda s: s.replace("2 1 1\n", "5 1 1\n"),
    lambda s: s.replace("0 0 1 2\n", "0 0 1 x\n"),
    lambda s: s.replace("TRIANGLES 2", "ELEMENTS 2"),
    lambda s: s + "EXTRA 1\n",
    lambda s: s.split("BOUNDARY")[0],
])
def test_parse_errors(tmp_path, mutate):
    with pytest.raises(MeshParseError):
        load_mesh(_write(tmp_path, mutate(TWO_TRIANGLES)))


def test_degenerate_triangle_rejected():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(MeshValidationError, match="triangle 0"):
        Mesh2D(nodes, np.array([[0, 1, 2]]), np.array([[0, 1], [1, 2], [2, 0]]), (DIRICHLET, NEUMANN, NEUMANN))


def test_interior_edge_listed_as_boundary():
    m = generate_unit_square(1, ["left"])
    edges = np.vstack([m.boundary_edges, [[0, 3]]])
    with pytest.raises(MeshValidationError, match="interior"):
        Mesh2D(m.nodes, m.triangles, edges, m.labels + (NEUMANN,))
