import numpy as np
import pytest
import scipy.sparse as sp

from nlmcflow import FRACTURE, MATRIX
from nlmcflow.exceptions import AssemblyError, InputError
from nlmcflow.fvm import MaterialParams, SourceSpec, SourceTerm, assemble
from nlmcflow.generator import random_fractures
from nlmcflow.geometry import (
    FractureGeometry,
    Rectangle,
    build_coarse_grid,
    fracture_elements,
    generate_structured_mesh,
    label_networks,
    oversample,
)
from nlmcflow.linalg import is_symmetric
from nlmcflow.nlmc import (
    assemble_projection,
    build_coarse_model,
    build_constraints,
    construct_bases,
    dump_basis,
    outside_fraction,
    solve_basis,
)
from nlmcflow.sim import TimeSpec, run


def _case(fine=10, coarse=5, segments=None, k_m=1e-6, k_f=1.0, sources=None):
    mesh = generate_structured_mesh(fine, fine)
    if segments is None:
        fractures = FractureGeometry.empty("efm")
    else:
        fractures = label_networks(segments, mode="efm")
    elements = fracture_elements(mesh, fractures)
    params = MaterialParams.from_permeability(mesh, elements, k_m, k_f, 1e-5, 1e-6)
    system = assemble(mesh, fractures, params, sources, elements)
    grid = build_coarse_grid(mesh, fractures, coarse, coarse, elements=elements)
    return system, grid


TWO_FRACTURES = [[[0.12, 0.15], [0.58, 0.47]], [[0.3, 0.85], [0.9, 0.62]]]


def test_matrix_constraints_without_fractures():
    system, grid = _case()
    over = oversample(grid, 12, 1)
    cset = build_constraints(over, grid, MATRIX)
    assert cset.n_rows == 9
    assert cset.target[cset.row_of_cell(12)] == 1.0
    assert cset.target.sum() == 1.0
    # Row weights sum to the coarse cell areas
    assert np.asarray(cset.B.sum(axis=1)).ravel() == pytest.approx(np.full(9, grid.cell_area))
    assert np.asarray(cset.mean_rows.sum(axis=1)).ravel() == pytest.approx(np.ones(9))


def test_fracture_constraint_target():
    system, grid = _case(segments=[[[0.05, 0.05], [0.15, 0.12]]])
    assert grid.n_fragments == 1
    frag = grid.fragments[0]
    over = oversample(grid, frag.cell, 1)
    cset = build_constraints(over, grid, FRACTURE, frag.network)
    assert cset.n_rows == len(over.coarse_cells) + 1
    row = cset.row_of_fragment(0)
    assert cset.target[row] == 1.0 and cset.target.sum() == 1.0
    assert cset.B[row].sum() == pytest.approx(frag.measure)
    with pytest.raises(InputError):
        build_constraints(over, grid, FRACTURE, network=5)


def test_homogeneous_matrix_basis_means():
    system, grid = _case()
    over = oversample(grid, 12, 1)
    basis = solve_basis(system, over, build_constraints(over, grid, MATRIX))
    assert basis.constraint_residual < 1e-10
    values = basis.dense(system.n_dofs)
    area = system.mesh.cell_area
    for j in over.coarse_cells:
        cells = grid.fine_cells_of[j]
        mean = np.dot(area[cells], values[cells]) / area[cells].sum()
        assert mean == pytest.approx(1.0 if j == 12 else 0.0, abs=1e-10)
    # Zero outside the oversampled region
    outside = np.setdiff1d(np.arange(system.n_matrix), over.fine_cells)
    assert np.all(values[outside] == 0.0)


def test_construct_bases_residuals_and_count():
    system, grid = _case(fine=20, coarse=5, segments=TWO_FRACTURES)
    bases = construct_bases(system, grid, 2)
    assert len(bases) == grid.n_cells + grid.n_fragments
    assert bases.max_constraint_residual < 1e-10
    kinds = [b.kind for b in bases]
    assert kinds.count(FRACTURE) == grid.n_fragments


def test_parallel_bases_match_serial():
    system, grid = _case(fine=20, coarse=5, segments=TWO_FRACTURES)
    serial = construct_bases(system, grid, 1)
    threaded = construct_bases(system, grid, 1, n_jobs=2)
    assert [b.key for b in serial] == [b.key for b in threaded]
    for a, b in zip(serial, threaded):
        assert np.array_equal(a.values, b.values)


def test_basis_decays_outside_owner():
    system, grid = _case(fine=20, coarse=5, segments=TWO_FRACTURES)
    for s in (2, 3):
        bases = construct_bases(system, grid, s)
        fractions = [outside_fraction(b, grid, system) for b in bases]
        assert max(fractions) < 1.0


def test_projection_without_fractures():
    system, grid = _case()
    bases = construct_bases(system, grid, 1)
    proj = assemble_projection(bases.bases, grid, system.n_matrix, system.n_fracture)
    assert proj.R.shape == (25, system.n_matrix)
    assert proj.blocks["mm"].shape == (25, system.n_matrix)
    assert proj.blocks["ff"].shape == (0, 0)
    frame = proj.dof_frame()
    assert list(frame.columns) == ["dof", "cell", "continuum", "network", "measure"]
    assert (frame["continuum"] == MATRIX).all()


def test_projection_missing_basis():
    system, grid = _case(fine=20, coarse=5, segments=TWO_FRACTURES)
    bases = [b for b in construct_bases(system, grid, 1) if b.kind == MATRIX]
    with pytest.raises(AssemblyError, match="fracture basis"):
        assemble_projection(bases, grid, system.n_matrix, system.n_fracture)


def test_coarse_dimension_on_twenty_by_twenty():
    mesh = generate_structured_mesh(40, 40)
    fractures = label_networks(random_fractures(12, mesh.bounds, 0.1, 0.3, seed=5))
    elements = fracture_elements(mesh, fractures)
    params = MaterialParams.from_permeability(mesh, elements, 1e-6, 1.0, 1e-5, 1e-6)
    system = assemble(mesh, fractures, params, elements=elements)
    grid = build_coarse_grid(mesh, fractures, 20, 20, elements=elements)
    bases = construct_bases(system, grid, 1)
    proj = assemble_projection(bases.bases, grid, system.n_matrix, system.n_fracture)
    model = build_coarse_model(proj, system, mass="diagonal")
    assert grid.n_cells == 400
    assert model.n_dofs == 400 + grid.n_fragments
    # Diagonal mass of a 0.05 x 0.05 coarse cell with a_m = 1e-5
    assert model.mass.diagonal()[0] == pytest.approx(2.5e-8)
    assert model.mass.diagonal()[400:] == pytest.approx(1e-6 * grid.fragment_measure)


def test_coarse_operator_structure():
    system, grid = _case(fine=20, coarse=5, segments=TWO_FRACTURES)
    bases = construct_bases(system, grid, 2)
    proj = assemble_projection(bases.bases, grid, system.n_matrix, system.n_fracture)
    model = build_coarse_model(proj, system)
    A = model.stiffness
    assert is_symmetric(A, 1e-12)
    row_sums = np.abs(A @ np.ones(model.n_dofs))
    assert row_sums.max() <= 1e-9 * abs(A).max()
    assert is_symmetric(model.mass, 1e-12)
    assert model.n_matrix == grid.n_cells

    # The correction only touches the diagonal
    uncorrected = build_coarse_model(proj, system, row_sum_correction=False)
    delta = (uncorrected.stiffness - A).tocoo()
    assert np.all(delta.row[delta.data != 0] == delta.col[delta.data != 0])


def test_coarse_rhs_modes():
    sources = SourceSpec((
        SourceTerm("injection", Rectangle(0.1, 0.1, 0.2, 0.2), "matrix", 1e-3),
        SourceTerm("production", Rectangle(0.8, 0.8, 0.9, 0.9), "matrix", -1e-3),
    ))
    system, grid = _case(fine=20, coarse=5, segments=TWO_FRACTURES, sources=sources)
    bases = construct_bases(system, grid, 1)
    proj = assemble_projection(bases.bases, grid, system.n_matrix, system.n_fracture)
    direct = build_coarse_model(proj, system, rhs="direct", grid=grid)
    assert direct.rhs.sum() == pytest.approx(0.0, abs=1e-15)
    assert direct.rhs[0] == pytest.approx(1e-3 * 0.01)
    galerkin = build_coarse_model(proj, system)
    assert np.allclose(galerkin.rhs, proj.R @ system.rhs)

    with pytest.raises(InputError):
        build_coarse_model(proj, system, rhs="direct")
    with pytest.raises(InputError):
        build_coarse_model(proj, system, mass="lumped")


def test_galerkin_rhs_imbalance_is_partition_defect():
    sources = SourceSpec((
        SourceTerm("injection", Rectangle(0.1, 0.1, 0.2, 0.2), "matrix", 1e-3),
        SourceTerm("production", Rectangle(0.8, 0.8, 0.9, 0.9), "matrix", -1e-3),
    ))
    system, grid = _case(fine=20, coarse=5, segments=TWO_FRACTURES, sources=sources)
    F = system.rhs
    for s in (1, float("inf")):
        proj = assemble_projection(construct_bases(system, grid, s).bases, grid, system.n_matrix, system.n_fracture)
        model = build_coarse_model(proj, system)
        # R F loses exactly what the columns of R miss from summing to one
        defect = np.asarray(proj.R.sum(axis=0)).ravel() - 1.0
        assert model.rhs.sum() - F.sum() == pytest.approx(defect @ F, abs=1e-15)
    assert abs(model.rhs.sum() - F.sum()) <= 1e-8 * np.abs(F).sum()
    direct = build_coarse_model(proj, system, rhs="direct", grid=grid)
    assert direct.rhs.sum() == pytest.approx(F.sum(), abs=1e-15)


def test_zero_source_coarse_state_is_steady():
    system, grid = _case(fine=20, coarse=5, segments=TWO_FRACTURES)
    bases = construct_bases(system, grid, 2)
    proj = assemble_projection(bases.bases, grid, system.n_matrix, system.n_fracture)
    model = build_coarse_model(proj, system)
    assert np.array_equal(model.stiffness @ np.ones(model.n_dofs), np.zeros(model.n_dofs))
    trajectory = run(model, TimeSpec(t_max=0.1, n_steps=5, p0=1.0))
    assert np.array_equal(trajectory.states, np.ones_like(trajectory.states))


def test_dump_basis(tmp_path):
    system, grid = _case()
    over = oversample(grid, 0, 1)
    basis = solve_basis(system, over, build_constraints(over, grid, MATRIX))
    path = dump_basis(str(tmp_path), basis, system.n_dofs)
    assert path.endswith("basis_0_matrix_-1.txt")
    assert open(path).readline() == f"# {system.n_dofs}\n"


def test_whole_grid_region():
    system, grid = _case(coarse=2)
    bases = construct_bases(system, grid, float("inf"))
    assert all(len(b.dofs) == system.n_matrix for b in bases)
    proj = assemble_projection(bases.bases, grid, system.n_matrix, system.n_fracture)
    # Bases partition unity: their sum reproduces the constant field
    assert np.asarray(proj.R.sum(axis=0)).ravel() == pytest.approx(np.ones(system.n_matrix), abs=1e-8)
    assert sp.issparse(proj.R)


def _chebyshev(grid, a, b):
    (ax, ay), (bx, by) = grid.position(a), grid.position(b)
    return max(abs(ax - bx), abs(ay - by))


def test_coarse_operator_couples_neighbouring_fragments():
    system, grid = _case(fine=20, coarse=5, segments=TWO_FRACTURES)
    bases = construct_bases(system, grid, 1)
    proj = assemble_projection(bases.bases, grid, system.n_matrix, system.n_fracture)
    A = build_coarse_model(proj, system).stiffness.toarray()
    n_c = grid.n_cells
    neighbour, far = [], []
    for k, frag in enumerate(grid.fragments):
        for cell in range(n_c):
            d = _chebyshev(grid, cell, frag.cell)
            if d == 1 and grid.n_networks_in(cell) == 0:
                neighbour.append(abs(A[cell, n_c + k]))
            elif d >= 3:
                far.append(A[cell, n_c + k])
    # Matrix DOFs of fracture-free cells still exchange flux with nearby fragments
    assert max(neighbour) > 1e-11 * abs(A).max()
    # Supports of s=1 bases three rings apart never touch
    assert far and not np.any(far)


def test_basis_converges_with_oversampling():
    system, grid = _case(fine=36, coarse=9, segments=TWO_FRACTURES)
    center = grid.index(4, 4)
    inside = np.concatenate([
        np.asarray(grid.fine_cells_of[center], dtype=int),
        system.n_matrix + np.asarray(grid.elements_of[center], dtype=int),
    ])

    def restricted(s):
        over = oversample(grid, center, s)
        return solve_basis(system, over, build_constraints(over, grid, MATRIX)).dense(system.n_dofs)[inside]

    reference = restricted(float("inf"))
    psi = [restricted(s) for s in (1, 2, 3)]
    distance = [np.linalg.norm(p - reference) for p in psi]
    assert distance[0] > distance[1] > distance[2] > 0.0
    assert np.linalg.norm(psi[1] - psi[0]) > np.linalg.norm(psi[2] - psi[1])
