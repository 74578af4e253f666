import numpy as np
import pytest
from scipy.cluster.hierarchy import DisjointSet

from nlmcflow import BOUNDARY
from nlmcflow.exceptions import GeometryError, InputError
from nlmcflow.generator import random_fractures
from nlmcflow.geometry import (
    FineMesh,
    Rectangle,
    build_coarse_grid,
    clip_segment_to_cells,
    fracture_elements,
    generate_structured_mesh,
    label_networks,
    match_fracture_facets,
    oversample,
    read_mesh,
    read_mesh_file,
    write_mesh,
)


UNIT_SQUARE_FILE = """MESH2D
VERTICES 4
0 0
1 0
1 1
0 1
CELLS 2
0 1 2
0 2 3
"""


def test_structured_mesh_counts():
    mesh = generate_structured_mesh(1, 1)
    assert mesh.n_cells == 2
    assert mesh.total_area == pytest.approx(1.0)

    mesh = generate_structured_mesh(10, 10)
    assert mesh.n_cells == 200
    assert mesh.n_facets == 320
    assert len(mesh.interior_facets) == 280
    assert len(mesh.boundary_facets) == 40
    assert mesh.euler_characteristic == 1
    assert np.all(mesh.cell_area > 0)


def test_structured_mesh_rectangle_domain():
    mesh = generate_structured_mesh(2, 1, [0.0, 0.0, 2.0, 1.0])
    assert mesh.n_cells == 4
    assert np.allclose(mesh.cell_area, 0.5)
    assert mesh.total_area == pytest.approx(2.0, rel=1e-10)


@pytest.mark.parametrize("nx, ny", [(0, 1), (1, -2)])
def test_structured_mesh_rejects_bad_counts(nx, ny):
    with pytest.raises(InputError):
        generate_structured_mesh(nx, ny)


def test_degenerate_rectangle_rejected():
    with pytest.raises(InputError):
        Rectangle(0.0, 0.0, 0.0, 1.0)


def test_interior_facets_have_two_distinct_cells():
    mesh = generate_structured_mesh(4, 3)
    fc = mesh.facet_cells[mesh.interior_facets]
    assert np.all(fc[:, 0] != fc[:, 1])
    assert np.all(mesh.facet_cells[mesh.boundary_facets, 1] == BOUNDARY)


def test_read_mesh_unit_square(tmp_path):
    path = tmp_path / "square.txt"
    path.write_text(UNIT_SQUARE_FILE)
    mesh = read_mesh(str(path))
    assert mesh.n_cells == 2
    assert mesh.total_area == pytest.approx(1.0)


def test_read_mesh_repeated_triangle(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text(UNIT_SQUARE_FILE.replace("CELLS 2", "CELLS 3") + "0 1 2\n")
    with pytest.raises(GeometryError, match="facet_manifold"):
        read_mesh(str(path))


def test_read_mesh_reports_line_number(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text(UNIT_SQUARE_FILE.replace("1 0\n", "1 zero\n", 1))
    with pytest.raises(InputError, match=r"bad.txt:4"):
        read_mesh(str(path))


def test_read_mesh_clockwise_cell(tmp_path):
    path = tmp_path / "cw.txt"
    path.write_text(UNIT_SQUARE_FILE.replace("0 1 2\n", "0 2 1\n"))
    with pytest.raises(GeometryError, match="orientation"):
        read_mesh(str(path))


def test_mesh_roundtrip_with_fractures(tmp_path):
    mesh = generate_structured_mesh(4, 4)
    fractures = label_networks([[[0.0, 0.25], [0.25, 0.25]], [[0.25, 0.25], [0.5, 0.25]]], mode="dfm",
                               fracture_ids=[0, 0])
    path = tmp_path / "mesh.txt"
    write_mesh(str(path), mesh, fractures)
    data = read_mesh_file(str(path))
    assert np.array_equal(data.mesh.cells, mesh.cells)
    assert np.array_equal(data.mesh.vertices, mesh.vertices)
    assert np.array_equal(data.segments, fractures.segments)
    assert data.fracture_ids.tolist() == [0, 0]


def test_clip_inside_one_cell():
    mesh = generate_structured_mesh(1, 1)
    pieces = clip_segment_to_cells([[0.6, 0.1], [0.9, 0.2]], mesh)
    assert len(pieces) == 1
    cell, piece, length = pieces[0]
    assert cell == 0
    assert length == pytest.approx(np.hypot(0.3, 0.1))


def test_clip_across_diagonal():
    mesh = generate_structured_mesh(1, 1)
    pieces = clip_segment_to_cells([[0.0, 0.5], [1.0, 0.5]], mesh)
    assert [c for c, _, _ in pieces] == [1, 0]
    assert [ln for _, _, ln in pieces] == pytest.approx([0.5, 0.5])


def test_clip_zero_length_and_outside():
    mesh = generate_structured_mesh(2, 2)
    assert clip_segment_to_cells([[0.3, 0.3], [0.3, 0.3]], mesh) == []
    with pytest.raises(InputError):
        clip_segment_to_cells([[0.5, 0.5], [1.5, 0.5]], mesh)


def _barycentric(tri, point):
    T = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    l1, l2 = np.linalg.solve(T, point - tri[0])
    return np.array([1.0 - l1 - l2, l1, l2])


@pytest.mark.parametrize("seed", range(100))
def test_clip_lengths_sum_to_segment_length(seed):
    mesh = generate_structured_mesh(8, 8)
    segments = random_fractures(20, mesh.bounds, 0.1, 0.5, seed=seed)
    for seg in segments:
        pieces = clip_segment_to_cells(seg, mesh)
        total = sum(length for _, _, length in pieces)
        assert total == pytest.approx(np.hypot(*(seg[1] - seg[0])), rel=1e-10)
        # Both piece ends lie in the closed host triangle
        for cell, piece, length in pieces:
            tri = mesh.vertices[mesh.cells[cell]]
            for end in piece:
                assert _barycentric(tri, end).min() >= -1e-9
            assert length == pytest.approx(np.hypot(*(piece[1] - piece[0])), rel=1e-12)


def test_label_networks_disjoint_and_crossing():
    disjoint = label_networks([[[0.1, 0.1], [0.3, 0.1]], [[0.1, 0.5], [0.3, 0.5]]])
    assert disjoint.n_networks == 2
    crossing = label_networks([[[0.1, 0.1], [0.5, 0.5]], [[0.1, 0.5], [0.5, 0.1]]])
    assert crossing.n_networks == 1
    touching = label_networks([[[0.1, 0.1], [0.3, 0.1]], [[0.3, 0.1], [0.3, 0.4]]])
    assert touching.network_id.tolist() == [0, 0]


def test_label_networks_empty():
    with pytest.raises(InputError):
        label_networks(np.zeros((0, 2, 2)))


def _segments_intersect(a, b):
    def orient(p, q, r):
        return np.sign((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))

    def on_segment(p, q, r):
        return min(p[0], q[0]) <= r[0] <= max(p[0], q[0]) and min(p[1], q[1]) <= r[1] <= max(p[1], q[1])

    p1, q1 = a
    p2, q2 = b
    o1, o2, o3, o4 = orient(p1, q1, p2), orient(p1, q1, q2), orient(p2, q2, p1), orient(p2, q2, q1)
    if o1 != o2 and o3 != o4:
        return True
    return any([
        o1 == 0 and on_segment(p1, q1, p2),
        o2 == 0 and on_segment(p1, q1, q2),
        o3 == 0 and on_segment(p2, q2, p1),
        o4 == 0 and on_segment(p2, q2, q1),
    ])


@pytest.mark.parametrize("seed", range(100))
def test_label_networks_matches_union_find(seed):
    segments = random_fractures(30, Rectangle(0.0, 0.0, 1.0, 1.0), 0.1, 0.3, seed=seed)
    labelled = label_networks(segments)
    ds = DisjointSet(range(len(segments)))
    for i in range(len(segments)):
        for j in range(i + 1, len(segments)):
            if _segments_intersect(segments[i], segments[j]):
                ds.merge(i, j)
    assert labelled.n_networks == len(ds.subsets())
    for i in range(len(segments)):
        for j in range(len(segments)):
            assert (labelled.network_id[i] == labelled.network_id[j]) == ds.connected(i, j)


def test_match_fracture_facets():
    mesh = generate_structured_mesh(4, 4)
    fractures = label_networks([[[0.25, 0.25], [0.5, 0.25]]], mode="dfm")
    facets = match_fracture_facets(mesh, fractures)
    a, b = mesh.facets[facets[0]]
    assert {tuple(mesh.vertices[a]), tuple(mesh.vertices[b])} == {(0.25, 0.25), (0.5, 0.25)}

    off = label_networks([[[0.1, 0.25], [0.5, 0.25]]], mode="dfm")
    with pytest.raises(GeometryError, match="conformity"):
        match_fracture_facets(mesh, off)


def test_dfm_elements_couple_both_neighbours():
    mesh = generate_structured_mesh(4, 4)
    fractures = label_networks([[[0.25, 0.25], [0.5, 0.25]], [[0.0, 0.0], [0.25, 0.0]]], mode="dfm")
    elements = fracture_elements(mesh, fractures)
    assert elements.n == 2
    assert np.all(elements.host[0] != BOUNDARY)
    # A fracture on the domain boundary has a single host
    assert elements.host[1, 1] == BOUNDARY


def test_coarse_grid_fragments():
    mesh = generate_structured_mesh(4, 4)
    inside = label_networks([[[0.1, 0.1], [0.3, 0.2]]], mode="efm")
    grid = build_coarse_grid(mesh, inside, 2, 2)
    assert grid.n_cells == 4
    assert [grid.n_networks_in(i) for i in range(4)] == [1, 0, 0, 0]

    crossing = label_networks([[[0.3, 0.3], [0.7, 0.3]]], mode="efm")
    grid = build_coarse_grid(mesh, crossing, 2, 2)
    assert [f.cell for f in grid.fragments] == [0, 1]
    assert grid.fragment_measure.sum() == pytest.approx(0.4, rel=1e-9)
    assert grid.fragment_measure == pytest.approx([0.2, 0.2])


@pytest.mark.parametrize("seed", range(100))
def test_coarse_grid_network_lengths_preserved(seed):
    mesh = generate_structured_mesh(20, 20)
    fractures = label_networks(random_fractures(15, mesh.bounds, 0.1, 0.3, seed=seed))
    grid = build_coarse_grid(mesh, fractures, 5, 5)
    for net in range(fractures.n_networks):
        total = sum(f.measure for f in grid.fragments if f.network == net)
        assert total == pytest.approx(fractures.network_length(net), rel=1e-9)
    assert np.bincount(grid.cell_of_fine, minlength=25).sum() == mesh.n_cells


def test_twenty_by_twenty_coarse_grid():
    mesh = generate_structured_mesh(40, 40)
    grid = build_coarse_grid(mesh, label_networks([[[0.1, 0.1], [0.2, 0.2]]]), 20, 20)
    assert grid.n_cells == 400
    assert all(len(cells) == 8 for cells in grid.fine_cells_of)


def test_coarse_grid_centroid_outside():
    mesh = generate_structured_mesh(2, 2, [0.0, 0.0, 2.0, 2.0])
    with pytest.raises(GeometryError):
        build_coarse_grid(mesh, label_networks([[[0.1, 0.1], [0.2, 0.2]]]), 2, 2, domain=[0.0, 0.0, 1.0, 1.0])


@pytest.mark.parametrize("nx_c, ny_c", [(4, 4), (8, 1), (1, 5)])
def test_coarse_grid_rejects_empty_coarse_cells(nx_c, ny_c):
    mesh = generate_structured_mesh(2, 2)
    with pytest.raises(InputError, match="receives no fine cells"):
        build_coarse_grid(mesh, label_networks([[[0.1, 0.1], [0.2, 0.2]]]), nx_c, ny_c)


def test_oversample_rings():
    mesh = generate_structured_mesh(10, 10)
    grid = build_coarse_grid(mesh, label_networks([[[0.1, 0.1], [0.2, 0.2]]]), 5, 5)
    center = oversample(grid, 12, 1)
    assert len(center.coarse_cells) == 9
    assert center.contains(12)
    assert len(center.fine_cells) == 9 * 8
    assert len(oversample(grid, 0, 1).coarse_cells) == 4
    assert len(oversample(grid, 12, float("inf")).coarse_cells) == 25
    for i in (0, 7, 12):
        s2 = set(oversample(grid, i, 2).coarse_cells)
        s3 = set(oversample(grid, i, 3).coarse_cells)
        assert i in s2 and s2 <= s3


def test_oversample_invalid():
    mesh = generate_structured_mesh(4, 4)
    grid = build_coarse_grid(mesh, label_networks([[[0.1, 0.1], [0.2, 0.2]]]), 2, 2)
    with pytest.raises(InputError):
        oversample(grid, 4, 1)
    with pytest.raises(InputError):
        oversample(grid, 0, 0)


def test_from_triangles_overlapping_cells():
    # Both triangles traverse the shared facet 0-1 in the same direction
    verts = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
    with pytest.raises(GeometryError):
        FineMesh.from_triangles(verts, np.array([[0, 1, 2], [0, 1, 3]]))
