import numpy as np
import pytest

from nlmcflow.config import GeometryConfig
from nlmcflow.exceptions import GeometryError, InputError
from nlmcflow.generator import generate_case, lattice_fractures, lognormal_permeability, random_fractures
from nlmcflow.geometry import UNIT_SQUARE, generate_structured_mesh, label_networks, match_fracture_facets


def test_random_fractures_reproducible():
    a = random_fractures(30, UNIT_SQUARE, 0.1, 0.3, seed=1)
    b = random_fractures(30, UNIT_SQUARE, 0.1, 0.3, seed=1)
    assert a.shape == (30, 2, 2)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, random_fractures(30, UNIT_SQUARE, 0.1, 0.3, seed=2))
    lengths = np.linalg.norm(a[:, 1] - a[:, 0], axis=1)
    assert np.all((lengths >= 0.1 - 1e-12) & (lengths <= 0.3 + 1e-12))
    assert np.all((a >= 0.0) & (a <= 1.0))


def test_random_fractures_anchors_and_empty():
    segs = random_fractures(3, UNIT_SQUARE, 0.1, 0.2, seed=4, anchors=[[0.125, 0.075]])
    assert segs[0].mean(axis=0) == pytest.approx([0.125, 0.075])
    assert random_fractures(0, UNIT_SQUARE, 0.1, 0.2, seed=4).shape == (0, 2, 2)
    with pytest.raises(InputError):
        random_fractures(-1, UNIT_SQUARE, 0.1, 0.2, seed=4)
    with pytest.raises(GeometryError):
        random_fractures(2, UNIT_SQUARE, 2.0, 3.0, seed=4)


def test_lattice_fractures_conform_to_mesh():
    mesh = generate_structured_mesh(16, 16)
    segments, fids = lattice_fractures(8, 16, 16, UNIT_SQUARE, 0.1, 0.4, seed=3)
    assert len(segments) == len(fids)
    assert sorted(set(fids.tolist())) == list(range(8))
    fractures = label_networks(segments, mode="dfm", fracture_ids=fids)
    facets = match_fracture_facets(mesh, fractures)
    assert len(np.unique(facets)) == len(segments)
    with pytest.raises(GeometryError, match="infeasible"):
        lattice_fractures(20, 2, 2, UNIT_SQUARE, 0.5, 1.0, seed=3)


def test_lognormal_permeability():
    k = lognormal_permeability(10, 8, 1e-6, 1.0, 0.1, UNIT_SQUARE, seed=2)
    assert k.shape == (160,)
    assert np.all(k > 0)
    # Both triangles of a quad share one value
    assert np.array_equal(k[0::2], k[1::2])
    assert np.array_equal(k, lognormal_permeability(10, 8, 1e-6, 1.0, 0.1, UNIT_SQUARE, seed=2))
    flat = lognormal_permeability(4, 4, 3.0, 0.0, 0.1, UNIT_SQUARE, seed=2)
    assert flat == pytest.approx(np.full(32, 3.0))


@pytest.mark.parametrize("model", ["efm", "dfm"])
def test_generate_case(model):
    cfg = GeometryConfig(fine_nx=16, fine_ny=16, n_fractures=6, length_min=0.1, length_max=0.3, seed=5)
    case = generate_case(cfg, model, 1e-6)
    assert case.mesh.n_cells == 512
    assert case.fractures.mode == model
    assert case.fractures.n_fractures == 6
    assert case.permeability is None

    empty = generate_case(GeometryConfig(fine_nx=4, fine_ny=4, n_fractures=0), model, 1e-6)
    assert empty.fractures.n_segments == 0


def test_generate_case_heterogeneous():
    cfg = GeometryConfig(fine_nx=8, fine_ny=8, n_fractures=2, heterogeneous=True, seed=3)
    case = generate_case(cfg, "efm", 1e-6)
    assert case.permeability.shape == (case.mesh.n_cells,)
