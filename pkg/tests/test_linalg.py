import numpy as np
import pytest
import scipy.sparse as sp

from nlmcflow.exceptions import InputError, SolverError
from nlmcflow.linalg import (
    DenseFactor,
    LuFactor,
    SaddleFactor,
    SaddleSystem,
    SpdFactor,
    check_constraint_rank,
    dump_matrix,
    dump_vector,
    is_symmetric,
    load_matrix,
    load_vector,
    solve_saddle,
    solve_spd,
    triple_product,
    zero_row_sum,
)


def _laplacian_1d(n, mass=1e-3):
    main = np.full(n, 2.0)
    main[[0, -1]] = 1.0
    A = sp.diags([main, -np.ones(n - 1), -np.ones(n - 1)], [0, -1, 1])
    return (A + mass * sp.identity(n)).tocsr()


def test_spd_identity_and_two_by_two():
    b = np.array([3.0, -1.0, 2.0])
    assert solve_spd(sp.identity(3), b).x == pytest.approx(b)
    A = sp.csr_matrix([[2.0, -1.0], [-1.0, 2.0]])
    result = solve_spd(A, np.ones(2))
    assert result.x == pytest.approx([1.0, 1.0])
    assert result.residual < 1e-10


def test_spd_random_residual():
    rng = np.random.default_rng(0)
    G = rng.standard_normal((50, 50))
    A = sp.csr_matrix(G @ G.T + 50 * np.eye(50))
    b = rng.standard_normal(50)
    result = SpdFactor(A).solve(b)
    assert np.linalg.norm(A @ result.x - b) <= 1e-10 * np.linalg.norm(b)


def test_spd_rejects_indefinite_and_unsymmetric():
    with pytest.raises(SolverError):
        SpdFactor(sp.diags([1.0, -1.0]))
    with pytest.raises(SolverError):
        SpdFactor(sp.csr_matrix([[2.0, 1.0], [0.0, 2.0]]))
    with pytest.raises(InputError):
        SpdFactor(sp.csr_matrix(np.ones((2, 3))))


def test_lu_solves_unsymmetric():
    A = sp.csr_matrix([[2.0, 1.0], [0.0, 3.0]])
    result = LuFactor(A).solve(np.array([3.0, 3.0]))
    assert result.x == pytest.approx([1.0, 1.0])


def test_dense_factor_cholesky_then_lu():
    rng = np.random.default_rng(5)
    A = _laplacian_1d(40)
    b = rng.standard_normal(40)
    spd = DenseFactor(A)
    assert spd.cholesky
    x = spd.solve(b).x
    assert np.linalg.norm(x - SpdFactor(A).solve(b).x) <= 1e-9 * np.linalg.norm(x)

    # Symmetric but indefinite: Cholesky fails, LU takes over
    indefinite = DenseFactor(sp.diags([1.0, -2.0, 3.0]))
    assert not indefinite.cholesky
    assert indefinite.solve(np.array([1.0, 1.0, 1.0])).x == pytest.approx([1.0, -0.5, 1.0 / 3.0])

    unsymmetric = A + sp.csr_matrix(([0.7], ([0], [9])), shape=(40, 40))
    result = DenseFactor(unsymmetric).solve(b)
    assert np.linalg.norm(unsymmetric @ result.x - b) <= 1e-10 * np.linalg.norm(b)
    assert np.array_equal(spd.solve(np.zeros(40)).x, np.zeros(40))

    with pytest.raises(SolverError):
        DenseFactor(sp.csr_matrix((3, 3)))


def test_saddle_single_mean_constraint():
    # One cell of area 0.5, constraint "area-weighted mean = 1"
    result = solve_saddle(SaddleSystem(A=sp.csr_matrix([[1.0]]), B=sp.csr_matrix([[0.5]]), g=np.array([0.5])))
    assert result.x == pytest.approx([1.0])
    assert result.constraint_residual < 1e-12


def test_saddle_duplicated_constraint_named():
    A = _laplacian_1d(6)
    row = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    B = sp.csr_matrix(np.vstack([row, 2.0 * row]))
    with pytest.raises(SolverError, match="depends on the others"):
        SaddleFactor(A, B, labels=["cell 3", "cell 7"])
    with pytest.raises(SolverError):
        check_constraint_rank(sp.csr_matrix((1, 4)))


def test_saddle_constraint_residual_and_minimality():
    n = 40
    A = _laplacian_1d(n, mass=0.0) + sp.diags(np.r_[1.0, np.zeros(n - 1)])
    blocks = np.zeros((4, n))
    for k in range(4):
        blocks[k, 10 * k:10 * (k + 1)] = 0.1
    B = sp.csr_matrix(blocks)
    g = np.array([0.0, 1.0, 0.0, 0.0])
    result = SaddleFactor(A, B).solve(g)
    assert result.constraint_residual < 1e-10
    assert result.residual < 1e-10
    # Any other vector with the same constraint values has larger energy
    x = result.x
    rng = np.random.default_rng(1)
    for _ in range(5):
        z = rng.standard_normal(n)
        z -= B.T @ np.linalg.solve((B @ B.T).toarray(), B @ z)
        y = x + 1e-2 * z
        assert y @ (A @ y) >= x @ (A @ x)


def test_saddle_multiple_right_hand_sides():
    A = _laplacian_1d(12)
    B = sp.csr_matrix(np.kron(np.eye(3), np.full(4, 0.25)))
    factor = SaddleFactor(A, B, regularization=True)
    G = np.eye(3)
    result = factor.solve(G)
    assert result.x.shape == (12, 3)
    assert np.abs(B @ result.x - G).max() < 1e-10
    single = factor.solve(G[:, 1])
    assert single.x == pytest.approx(result.x[:, 1], abs=1e-12)


def test_triple_product():
    A = _laplacian_1d(5)
    assert abs(triple_product(sp.identity(5), A) - A).max() == pytest.approx(0.0, abs=1e-15)

    zero_rows = _laplacian_1d(5, mass=0.0)
    assert abs(triple_product(sp.csr_matrix(np.ones((1, 5))), zero_rows)).max() == pytest.approx(0.0, abs=1e-14)

    rng = np.random.default_rng(3)
    R = rng.standard_normal((10, 20))
    S = rng.standard_normal((20, 20))
    S = S + S.T
    out = triple_product(sp.csr_matrix(R), sp.csr_matrix(S))
    dense = R @ S @ R.T
    assert np.linalg.norm(out.toarray() - dense) <= 1e-12 * np.linalg.norm(dense)
    assert is_symmetric(out, 1e-12)

    with pytest.raises(InputError):
        triple_product(sp.identity(3), A)


def test_zero_row_sum_is_exact(tmp_path):
    rng = np.random.default_rng(11)
    W = sp.random(60, 60, density=0.1, random_state=rng, format="csr")
    W.data *= 10.0 ** rng.uniform(-9, 3, W.nnz)
    W = (W + W.T) / 2
    B = -W + sp.diags(rng.standard_normal(60))
    before = B.copy()
    A = zero_row_sum(B)
    assert np.array_equal(A @ np.ones(60), np.zeros(60))
    assert abs(A - A.T).max() == 0.0
    off = (A - sp.diags(A.diagonal())).toarray()
    assert np.array_equal(off, -(W - sp.diags(W.diagonal())).toarray())
    assert abs(B - before).max() == 0.0

    # Sorted text round trip loses the ordering; reapplying restores it
    loaded = load_matrix(dump_matrix(str(tmp_path / "A.txt"), A))
    assert abs(loaded - A).max() == 0.0
    assert np.array_equal(zero_row_sum(loaded) @ np.ones(60), np.zeros(60))

    with pytest.raises(InputError):
        zero_row_sum(sp.csr_matrix((2, 3)))


def test_matrix_and_vector_dumps(tmp_path):
    A = sp.csr_matrix([[1.0 / 3.0, 0.0], [0.0, -2.5e-17]])
    path = dump_matrix(str(tmp_path / "A.txt"), A)
    assert open(path).readline() == "# 2 2\n"
    assert abs(load_matrix(path) - A).max() == 0.0

    v = np.array([0.0, np.pi, 0.0, -1e-300])
    assert np.array_equal(load_vector(dump_vector(str(tmp_path / "v.txt"), v)), v)

    bad = tmp_path / "bad.txt"
    bad.write_text("0 0 1.0\n")
    with pytest.raises(InputError):
        load_matrix(str(bad))
