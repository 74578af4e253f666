import meshio
import numpy as np

from nlmcflow.geometry import fracture_elements, generate_structured_mesh, label_networks
from nlmcflow.io import write_vtk


def test_vtk_fracture_elements_are_line_cells(tmp_path):
    mesh = generate_structured_mesh(4, 4)
    fractures = label_networks([[[0.1, 0.1], [0.9, 0.3]]], mode="efm")
    elements = fracture_elements(mesh, fractures)
    p_m = np.linspace(0.0, 1.0, mesh.n_cells)
    p_f = np.arange(elements.n, dtype=float) + 2.0

    data = meshio.read(write_vtk(str(tmp_path / "p.vtk"), mesh, p_m, elements, p_f))
    assert [block.type for block in data.cells] == ["triangle", "line"]
    lines = data.cells[1].data
    assert lines.shape == (elements.n, 2)
    assert np.allclose(data.points[lines][:, :, :2], elements.endpoints)
    assert np.allclose(data.cell_data["pressure"][0], p_m)
    assert np.allclose(data.cell_data["pressure"][1], p_f)
    assert data.cell_data["continuum"][1].tolist() == [1] * elements.n


def test_vtk_without_fractures_has_triangles_only(tmp_path):
    mesh = generate_structured_mesh(2, 2)
    data = meshio.read(write_vtk(str(tmp_path / "p.vtk"), mesh, np.ones(mesh.n_cells)))
    assert [block.type for block in data.cells] == ["triangle"]
    assert np.allclose(data.cell_data["pressure"][0], 1.0)
