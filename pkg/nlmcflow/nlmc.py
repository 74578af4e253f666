"""
Non-local multi-continuum upscaling.

For every coarse cell K_i and every fragment of a fracture network inside it, a
basis function is the minimum-energy fine field on the oversampled region K_i^+
(zero outside) whose means over all coarse cells and fragments of K_i^+ are
prescribed: one on its own entity, zero on every other. The bases form the rows
of the projection R, and the coarse model is

    A_c = R A R^T,   M_c = R M R^T (or diagonal),   F_c = R F (or aggregated).

Coarse unknowns are therefore mean pressures per coarse cell and per fragment.
"""
from __future__ import annotations

import os
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from joblib import Parallel, delayed

from . import FRACTURE, MATRIX
from .exceptions import AssemblyError, InputError, SolverError
from .fvm import BlockSystem
from .geometry import CoarseGrid, Oversample, oversample
from .linalg import SaddleFactor, dump_vector, is_symmetric, triple_product, zero_row_sum


logger = logging.getLogger("nlmcflow.nlmc")

MASS_MODES = ("galerkin", "diagonal")
RHS_MODES = ("galerkin", "direct")
CONSTRAINT_TOL = 1.0e-10


# ---------------------- Constraints ----------------------
@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Integral constraints of one oversampled region.

    Row k of ``B`` integrates a local field over coarse cell ``cells[k]``
    (area weights) or, after the cell rows, over fragment ``fragments[k - n_cells]``
    (length weights). Local columns are the region's fine cells, then its elements.
    """

    oversample: Oversample
    B: sp.csr_matrix
    measure: np.ndarray
    cells: np.ndarray
    fragments: np.ndarray
    labels: Tuple[str, ...]
    target: np.ndarray
    kind: str
    network: int = -1

    @property
    def n_rows(self) -> int:
        return self.B.shape[0]

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def mean_rows(self) -> sp.csr_matrix:
        """B scaled to mean values (each row sums to one)."""
        return sp.diags(1.0 / self.measure) @ self.B

    def row_of_cell(self, j: int) -> int:
        k = np.flatnonzero(self.cells == j)
        if not k.size:
            raise InputError(f"coarse cell {j} is not part of the region around cell {self.oversample.center}")
        return int(k[0])

    def row_of_fragment(self, f: int) -> int:
        k = np.flatnonzero(self.fragments == f)
        if not k.size:
            raise InputError(f"fragment {f} is not part of the region around cell {self.oversample.center}")
        return self.n_cells + int(k[0])

    def target_for(self, grid: CoarseGrid, kind: str, network: int = -1) -> np.ndarray:
        """Kronecker pattern for the matrix basis or the fracture basis of ``network``."""
        i = self.oversample.center
        t = np.zeros(self.n_rows)
        if kind == MATRIX:
            t[self.row_of_cell(i)] = 1.0
        elif kind == FRACTURE:
            f = grid.fragment_index.get((i, int(network)))
            if f is None:
                raise InputError(f"no fragment of network {network} in coarse cell {i}")
            t[self.row_of_fragment(f)] = 1.0
        else:
            raise InputError(f"basis kind must be '{MATRIX}' or '{FRACTURE}', got {kind!r}")
        return t


def build_constraints(over: Oversample, grid: CoarseGrid, kind: str = MATRIX, network: int = -1) -> ConstraintSet:
    rows, cols, vals = [], [], []
    measure, labels = [], []
    n_fine = len(over.fine_cells)
    for r, j in enumerate(over.coarse_cells):
        members = grid.fine_cells_of[j]
        if not len(members):
            raise InputError(f"coarse cell {j} contains no fine cell")
        w = grid.fine_area[members]
        rows.append(np.full(len(members), r))
        cols.append(np.searchsorted(over.fine_cells, members))
        vals.append(w)
        measure.append(w.sum())
        labels.append(f"coarse cell {j}")
    frag_ids = np.array(
        sorted(f for j in over.coarse_cells for f in grid.fragments_by_cell[j]), dtype=np.int64
    )
    length = grid.elements.length
    for k, f in enumerate(frag_ids):
        frag = grid.fragments[f]
        rows.append(np.full(len(frag.elements), len(over.coarse_cells) + k))
        cols.append(n_fine + np.searchsorted(over.elements, frag.elements))
        vals.append(length[frag.elements])
        measure.append(frag.measure)
        labels.append(f"fragment {f} (coarse cell {frag.cell}, network {frag.network})")
    n_rows = len(over.coarse_cells) + len(frag_ids)
    B = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_rows, over.n_local)
    ).tocsr()
    cset = ConstraintSet(
        oversample=over,
        B=B,
        measure=np.asarray(measure, dtype=float),
        cells=np.asarray(over.coarse_cells, dtype=np.int64),
        fragments=frag_ids,
        labels=tuple(labels),
        target=np.zeros(n_rows),
        kind=kind,
        network=int(network),
    )
    return replace(cset, target=cset.target_for(grid, kind, network))


# ---------------------- Basis functions ----------------------
@dataclass(frozen=True, eq=False)
class BasisFunction:
    """One row of R: a fine field supported on the fine DOFs of K_i^+."""

    owner: int
    kind: str
    network: int
    layers: int
    dofs: np.ndarray
    values: np.ndarray
    constraint_residual: float
    flow_residual: float
    multipliers: Optional[np.ndarray] = None

    @property
    def key(self) -> Tuple[int, str, int]:
        return self.owner, self.kind, self.network

    def dense(self, n_dofs: int) -> np.ndarray:
        out = np.zeros(n_dofs)
        out[self.dofs] = self.values
        return out


def _local_operator(system: BlockSystem, over: Oversample) -> Tuple[np.ndarray, sp.csr_matrix]:
    # Restricting to the region's DOFs imposes zero Dirichlet values outside it
    dofs = over.dofs(system.n_matrix)
    A = system.stiffness
    return dofs, A[dofs][:, dofs].tocsr()


def _solve_cell(system: BlockSystem, grid: CoarseGrid, i: int, s, regularization: bool) -> List[BasisFunction]:
    over = oversample(grid, i, s)
    cset = build_constraints(over, grid, MATRIX)
    dofs, A_loc = _local_operator(system, over)
    B = cset.mean_rows
    kinds = [(MATRIX, -1)] + [(FRACTURE, grid.fragments[f].network) for f in grid.fragments_by_cell[i]]
    targets = np.column_stack([cset.target_for(grid, kind, l) for kind, l in kinds])
    try:
        result = SaddleFactor(A_loc, B, cset.labels, regularization).solve(targets)
    except SolverError as e:
        raise SolverError(f"basis solve failed for coarse cell i={i}, s={s}: {e}") from e
    bases = []
    for c, (kind, l) in enumerate(kinds):
        res = float(np.max(np.abs(B @ result.x[:, c] - targets[:, c])))
        if res > CONSTRAINT_TOL:
            raise SolverError(
                f"constraint residual {res:.3e} for basis (i={i}, l={l}, s={s}) exceeds {CONSTRAINT_TOL:.0e}"
            )
        bases.append(BasisFunction(
            owner=i,
            kind=kind,
            network=l,
            layers=over.layers,
            dofs=dofs,
            values=result.x[:, c].copy(),
            constraint_residual=res,
            flow_residual=result.residual,
            multipliers=result.multipliers[:, c].copy(),
        ))
    return bases


def solve_basis(system: BlockSystem, over: Oversample, constraints: ConstraintSet,
                regularization: bool = False) -> BasisFunction:
    """Minimum-energy field on ``over`` meeting ``constraints`` (mean values, zero outside)."""
    dofs, A_loc = _local_operator(system, over)
    B = constraints.mean_rows
    try:
        result = SaddleFactor(A_loc, B, constraints.labels, regularization).solve(constraints.target)
    except SolverError as e:
        raise SolverError(
            f"basis solve failed for (i={over.center}, l={constraints.network}, s={over.layers}): {e}"
        ) from e
    return BasisFunction(
        owner=over.center,
        kind=constraints.kind,
        network=constraints.network,
        layers=over.layers,
        dofs=dofs,
        values=result.x,
        constraint_residual=result.constraint_residual,
        flow_residual=result.residual,
        multipliers=result.multipliers,
    )


@dataclass(frozen=True, eq=False)
class BasisSet:
    layers: int
    bases: Tuple[BasisFunction, ...]

    def __len__(self) -> int:
        return len(self.bases)

    def __iter__(self):
        return iter(self.bases)

    @property
    def max_constraint_residual(self) -> float:
        return max((b.constraint_residual for b in self.bases), default=0.0)

    @property
    def max_flow_residual(self) -> float:
        return max((b.flow_residual for b in self.bases), default=0.0)


def construct_bases(system: BlockSystem, grid: CoarseGrid, layers, n_jobs: int = 1,
                    regularization: bool = False) -> BasisSet:
    """All bases for ``layers`` oversampling rings.

    One saddle factorization per coarse cell serves its matrix basis and all its
    fracture bases. With ``n_jobs != 1`` cells are solved on a thread pool; the
    result order is always by coarse cell.
    """
    if n_jobs == 1:
        per_cell = [_solve_cell(system, grid, i, layers, regularization) for i in range(grid.n_cells)]
    else:
        per_cell = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_solve_cell)(system, grid, i, layers, regularization) for i in range(grid.n_cells)
        )
    bases = tuple(b for cell in per_cell for b in cell)
    out = BasisSet(layers=int(per_cell[0][0].layers) if per_cell else int(layers), bases=bases)
    logger.info(
        "Constructed %d bases for s=%s (max constraint residual %.2e, max flow residual %.2e)",
        len(bases), layers, out.max_constraint_residual, out.max_flow_residual,
    )
    return out


def outside_fraction(basis: BasisFunction, grid: CoarseGrid, system: BlockSystem) -> float:
    """Share of the measure-weighted squared norm of ``basis`` lying outside its own coarse cell."""
    w = system.dof_measure[basis.dofs] * basis.values ** 2
    n_m = system.n_matrix
    is_matrix = basis.dofs < n_m
    owner = np.empty(len(basis.dofs), dtype=np.int64)
    owner[is_matrix] = grid.cell_of_fine[basis.dofs[is_matrix]]
    owner[~is_matrix] = grid.element_cell[basis.dofs[~is_matrix] - n_m]
    total = w.sum()
    return float(w[owner != basis.owner].sum() / total) if total > 0 else 0.0


def dump_basis(directory: str, basis: BasisFunction, n_dofs: int) -> str:
    path = os.path.join(directory, f"basis_{basis.owner}_{basis.kind}_{basis.network}.txt")
    return dump_vector(path, basis.dense(n_dofs))


# ---------------------- Projection ----------------------
@dataclass(frozen=True)
class CoarseDof:
    cell: int
    continuum: str
    network: int
    measure: float


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """R: matrix bases by coarse cell, then fracture bases by (cell, network)."""

    R: sp.csr_matrix
    dof_map: Tuple[CoarseDof, ...]
    n_coarse_matrix: int
    n_matrix: int
    layers: int

    @property
    def n_coarse(self) -> int:
        return self.R.shape[0]

    @property
    def blocks(self) -> Dict[str, sp.csr_matrix]:
        c, f = self.n_coarse_matrix, self.n_matrix
        return {
            "mm": self.R[:c, :f],
            "mf": self.R[:c, f:],
            "fm": self.R[c:, :f],
            "ff": self.R[c:, f:],
        }

    def dof_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(k, d.cell, d.continuum, d.network, d.measure) for k, d in enumerate(self.dof_map)],
            columns=["dof", "cell", "continuum", "network", "measure"],
        )


def coarse_dofs(grid: CoarseGrid) -> Tuple[CoarseDof, ...]:
    cells = [CoarseDof(i, MATRIX, -1, grid.cell_area) for i in range(grid.n_cells)]
    frags = [CoarseDof(f.cell, FRACTURE, f.network, f.measure) for f in grid.fragments]
    return tuple(cells + frags)


def assemble_projection(bases: Sequence[BasisFunction], grid: CoarseGrid, n_matrix: int,
                        n_fracture: int) -> ProjectionMatrix:
    dof_map = coarse_dofs(grid)
    by_key = {b.key: b for b in bases}
    rows, cols, vals = [], [], []
    for r, d in enumerate(dof_map):
        basis = by_key.get((d.cell, d.continuum, d.network))
        if basis is None:
            raise AssemblyError(f"missing {d.continuum} basis for (i={d.cell}, l={d.network})")
        rows.append(np.full(len(basis.dofs), r))
        cols.append(basis.dofs)
        vals.append(basis.values)
    n_dofs = n_matrix + n_fracture
    R = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(len(dof_map), n_dofs)
    ).tocsr()
    layers = bases[0].layers if len(bases) else 0
    proj = ProjectionMatrix(R=R, dof_map=dof_map, n_coarse_matrix=grid.n_cells, n_matrix=n_matrix, layers=layers)
    logger.info("Assembled projection R: %d x %d, nnz=%d", R.shape[0], R.shape[1], R.nnz)
    return proj


# ---------------------- Coarse model ----------------------
@dataclass(frozen=True, eq=False)
class CoarseModel:
    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    rhs: np.ndarray
    projection: ProjectionMatrix
    mass_mode: str
    rhs_mode: str
    row_sum_correction: bool

    @property
    def n_dofs(self) -> int:
        return self.stiffness.shape[0]

    @property
    def n_matrix(self) -> int:
        return self.projection.n_coarse_matrix


def build_coarse_model(projection: ProjectionMatrix, system: BlockSystem, mass: str = "galerkin",
                       rhs: str = "galerkin", row_sum_correction: bool = True,
                       grid: Optional[CoarseGrid] = None) -> CoarseModel:
    """Galerkin coarse operator plus coarse mass and right-hand side.

    ``row_sum_correction`` moves the row sums of R A R^T onto its diagonal so that
    constants lie in the kernel, as for the fine no-flow operator.
    """
    if mass not in MASS_MODES:
        raise InputError(f"mass mode must be one of {MASS_MODES}, got {mass!r}")
    if rhs not in RHS_MODES:
        raise InputError(f"rhs mode must be one of {RHS_MODES}, got {rhs!r}")
    R = projection.R
    if R.shape[1] != system.n_dofs:
        raise InputError(f"projection has {R.shape[1]} columns for {system.n_dofs} fine DOFs")

    A_c = triple_product(R, system.stiffness)
    if row_sum_correction:
        A_c = zero_row_sum(A_c)

    n_c = projection.n_coarse_matrix
    if mass == "galerkin":
        M_c = triple_product(R, system.mass)
    else:
        measure = np.array([d.measure for d in projection.dof_map])
        coeff = np.where(np.arange(len(measure)) < n_c, system.params.a_m, system.params.a_f)
        M_c = sp.diags(coeff * measure).tocsr()

    if rhs == "galerkin":
        F_c = R @ system.rhs
    else:
        if grid is None:
            raise InputError("direct coarse right-hand side needs the coarse grid")
        F_c = np.concatenate([
            np.bincount(grid.cell_of_fine, weights=system.F_m, minlength=grid.n_cells),
            np.array([system.F_f[f.elements].sum() for f in grid.fragments]),
        ])

    model = CoarseModel(
        stiffness=A_c,
        mass=M_c,
        rhs=np.asarray(F_c, dtype=float),
        projection=projection,
        mass_mode=mass,
        rhs_mode=rhs,
        row_sum_correction=row_sum_correction,
    )
    logger.info(
        "Built coarse model: DOF_c=%d (%d matrix + %d fracture), nnz=%d, symmetric=%s",
        model.n_dofs, n_c, model.n_dofs - n_c, A_c.nnz, is_symmetric(A_c, 1e-12),
    )
    return model


__all__ = [
    "ConstraintSet",
    "BasisFunction",
    "BasisSet",
    "CoarseDof",
    "ProjectionMatrix",
    "CoarseModel",
    "build_constraints",
    "solve_basis",
    "construct_bases",
    "outside_fraction",
    "dump_basis",
    "coarse_dofs",
    "assemble_projection",
    "build_coarse_model",
]
