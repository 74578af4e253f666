"""
Fine-scale finite-volume assembly for DFM and EFM models.

The block system is

    [A_m + diag(Q 1)   -Q               ] [p_m]   [F_m]
    [-Q^T              A_f + diag(Q^T 1)] [p_f] = [F_f]

with TPFA matrices A_m (matrix facets) and A_f (fracture element pairs), the
transfer block Q (entries sigma per cell/element coupling), and diagonal
storage M = diag(a_m |cell|, a_f |element|). No-flow on the exterior boundary.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from . import BOUNDARY, FRACTURE, MATRIX
from .exceptions import GeometryError, InputError
from .geometry import (
    FineMesh,
    FractureElements,
    FractureGeometry,
    Rectangle,
    fracture_elements,
    match_fracture_facets,
)
from .linalg import zero_row_sum


logger = logging.getLogger("nlmcflow.fvm")

ArrayLike = Union[float, Sequence[float], np.ndarray]


def _scalar_or_array(x: np.ndarray):
    return float(x) if np.ndim(x) == 0 else x


def sigma_from_perms(k_m: ArrayLike, k_f: ArrayLike):
    """Transfer coefficient 2 / (1/k_m + 1/k_f), the harmonic mean of the permeabilities."""
    km = np.asarray(k_m, dtype=float)
    kf = np.asarray(k_f, dtype=float)
    if np.any(km <= 0) or np.any(kf <= 0):
        raise InputError("permeabilities must be positive")
    return _scalar_or_array(2.0 / (1.0 / km + 1.0 / kf))


def transmissibility(facet_length: ArrayLike, centroid_distance: ArrayLike, b_left: ArrayLike,
                     b_right: Optional[ArrayLike] = None, left_fraction: ArrayLike = 0.5):
    """TPFA transmissibility b~ |E| / d.

    b~ is the distance-weighted harmonic mean of the two cell mobilities, with
    ``left_fraction`` the share of the centroid distance on the left side.
    """
    d = np.asarray(centroid_distance, dtype=float)
    if np.any(d <= 0):
        raise GeometryError("coincident cell centroids across a facet")
    bl = np.asarray(b_left, dtype=float)
    br = bl if b_right is None else np.asarray(b_right, dtype=float)
    w = np.asarray(left_fraction, dtype=float)
    b = 1.0 / (w / bl + (1.0 - w) / br)
    return _scalar_or_array(b * np.asarray(facet_length, dtype=float) / d)


def fracture_transmissibility(mid_l: np.ndarray, mid_n: np.ndarray, b_l: ArrayLike,
                              b_n: Optional[ArrayLike] = None):
    """W = b_f / d between fracture elements, d the midpoint distance.

    Different mobilities on the two sides enter through their harmonic mean.
    """
    ml = np.asarray(mid_l, dtype=float)
    mn = np.asarray(mid_n, dtype=float)
    d = np.hypot(*(np.atleast_2d(ml) - np.atleast_2d(mn)).T)
    if np.any(d <= 0):
        raise GeometryError("coincident fracture element midpoints")
    bl = np.asarray(b_l, dtype=float)
    bn = bl if b_n is None else np.asarray(b_n, dtype=float)
    w = 2.0 / (1.0 / bl + 1.0 / bn) / d
    return float(w[0]) if np.ndim(ml) == 1 else w


def fracture_permeability(elements: FractureElements, k_f: float, k_f_low: float = 1.0e-12,
                          n_low: int = 0, n_fractures: Optional[int] = None) -> np.ndarray:
    """Per-element k_f; the last ``n_low`` fractures (by fracture id) get ``k_f_low``."""
    k = np.full(elements.n, float(k_f))
    if n_low > 0 and elements.n:
        total = int(elements.fracture.max()) + 1 if n_fractures is None else n_fractures
        k[elements.fracture >= total - n_low] = float(k_f_low)
    return k


@dataclass(frozen=True, eq=False)
class MaterialParams:
    """Coefficients of the discrete model.

    ``b_m`` is per fine cell, ``b_f`` per fracture element, and ``sigma`` per
    (element, host slot), aligned with ``FractureElements.host``.
    """

    a_m: float
    a_f: float
    b_m: np.ndarray
    b_f: np.ndarray
    sigma: np.ndarray

    def __post_init__(self) -> None:
        if self.a_m < 0 or self.a_f < 0:
            raise InputError("storage coefficients a_m, a_f must be >= 0")
        if np.any(np.asarray(self.b_m) <= 0) or np.any(np.asarray(self.b_f) <= 0):
            raise InputError("mobilities b_m, b_f must be > 0")
        if np.any(np.asarray(self.sigma) < 0):
            raise InputError("transfer coefficient sigma must be >= 0")

    @classmethod
    def from_permeability(cls, mesh: FineMesh, elements: FractureElements, k_m: ArrayLike, k_f: ArrayLike,
                          c_m: float, c_f: float, mu: float = 1.0, thickness: float = 1.0,
                          sigma: Optional[float] = None, sigma_multiplier: float = 1.0) -> "MaterialParams":
        """a = c, b_m = k_m / mu, b_f = b k_f / mu; sigma from the host k_m and element k_f unless given."""
        if mu <= 0 or thickness <= 0:
            raise InputError("viscosity and fracture thickness must be > 0")
        km = np.broadcast_to(np.asarray(k_m, dtype=float), (mesh.n_cells,)).copy()
        kf = np.broadcast_to(np.asarray(k_f, dtype=float), (elements.n,)).copy()
        host = elements.host
        valid = host != BOUNDARY
        if sigma is None:
            sig = np.zeros(host.shape)
            if elements.n:
                cells = np.where(valid, host, 0)
                sig = np.where(valid, sigma_from_perms(km[cells], kf[:, None] * np.ones((1, 2))), 0.0)
        else:
            sig = np.where(valid, float(sigma), 0.0)
        return cls(
            a_m=float(c_m),
            a_f=float(c_f),
            b_m=km / mu,
            b_f=thickness * kf / mu,
            sigma=np.asarray(sig, dtype=float).reshape(host.shape) * sigma_multiplier,
        )


@dataclass(frozen=True)
class SourceTerm:
    name: str
    region: Rectangle
    target: str
    rate: float

    def __post_init__(self) -> None:
        if self.target not in (MATRIX, FRACTURE):
            raise InputError(f"source {self.name!r}: target must be '{MATRIX}' or '{FRACTURE}'")


@dataclass(frozen=True)
class SourceSpec:
    """Source terms applied as rate * measure on the entities inside each region.

    Regions are half-open rectangles; matrix cells are selected by centroid,
    fracture elements by midpoint.
    """

    terms: Tuple[SourceTerm, ...] = ()

    @classmethod
    def from_config(cls, sources: Iterable) -> "SourceSpec":
        return cls(tuple(
            SourceTerm(name=s.name, region=Rectangle.from_bounds(s.bounds), target=s.target, rate=float(s.rate))
            for s in sources
        ))

    def __iter__(self):
        return iter(self.terms)

    def __len__(self) -> int:
        return len(self.terms)


@dataclass(frozen=True, eq=False)
class BlockSystem:
    model: str
    A_m: sp.csr_matrix
    A_f: sp.csr_matrix
    Q: sp.csr_matrix
    m_m: np.ndarray
    m_f: np.ndarray
    F_m: np.ndarray
    F_f: np.ndarray
    params: MaterialParams
    mesh: FineMesh
    elements: FractureElements
    empty_sources: Tuple[str, ...] = ()

    @property
    def n_matrix(self) -> int:
        return self.A_m.shape[0]

    @property
    def n_fracture(self) -> int:
        return self.A_f.shape[0]

    @property
    def n_dofs(self) -> int:
        return self.n_matrix + self.n_fracture

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Block operator; its diagonal (transfer terms included) closes every row to zero."""
        if self.n_fracture == 0:
            return zero_row_sum(self.A_m)
        return zero_row_sum(sp.bmat([[self.A_m, -self.Q], [-self.Q.T, self.A_f]], format="csr"))

    @property
    def mass_diagonal(self) -> np.ndarray:
        return np.concatenate([self.m_m, self.m_f])

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return sp.diags(self.mass_diagonal).tocsr()

    @property
    def rhs(self) -> np.ndarray:
        return np.concatenate([self.F_m, self.F_f])

    @property
    def dof_measure(self) -> np.ndarray:
        return np.concatenate([self.mesh.cell_area, self.elements.length])


def _matrix_tpfa(mesh: FineMesh, b_m: np.ndarray, excluded: Optional[np.ndarray] = None) -> sp.csr_matrix:
    facets = mesh.interior_facets
    if excluded is not None and len(excluded):
        facets = np.setdiff1d(facets, excluded)
    left, right = mesh.facet_cells[facets].T
    cl, cr = mesh.cell_centroid[left], mesh.cell_centroid[right]
    mid = mesh.facet_midpoint[facets]
    dl = np.hypot(*(cl - mid).T)
    dr = np.hypot(*(cr - mid).T)
    T = np.atleast_1d(transmissibility(
        mesh.facet_length[facets], np.hypot(*(cl - cr).T), b_m[left], b_m[right], dl / (dl + dr)
    ))
    return _laplacian(left, right, T, mesh.n_cells)


def _laplacian(left: np.ndarray, right: np.ndarray, weights: np.ndarray, n: int) -> sp.csr_matrix:
    rows = np.concatenate([left, right])
    cols = np.concatenate([right, left])
    off = sp.coo_matrix((-np.concatenate([weights, weights]), (rows, cols)), shape=(n, n)).tocsr()
    return zero_row_sum(off)


def _fracture_tpfa(elements: FractureElements, b_f: np.ndarray) -> sp.csr_matrix:
    if len(elements.adjacency) == 0:
        return sp.csr_matrix((elements.n, elements.n))
    left, right = elements.adjacency.T
    W = np.atleast_1d(fracture_transmissibility(
        elements.midpoint[left], elements.midpoint[right], b_f[left], b_f[right]
    ))
    return _laplacian(left, right, W, elements.n)


def _coupling(elements: FractureElements, sigma: np.ndarray, n_cells: int) -> sp.csr_matrix:
    slot = elements.host != BOUNDARY
    rows = elements.host[slot]
    cols = np.broadcast_to(np.arange(elements.n)[:, None], elements.host.shape)[slot]
    return sp.coo_matrix((sigma[slot], (rows, cols)), shape=(n_cells, elements.n)).tocsr()


def _check_params(mesh: FineMesh, elements: FractureElements, params: MaterialParams) -> None:
    if len(params.b_m) != mesh.n_cells:
        raise InputError(f"b_m has {len(params.b_m)} values for {mesh.n_cells} cells")
    if len(params.b_f) != elements.n or params.sigma.shape != elements.host.shape:
        raise InputError(f"fracture parameters do not match the {elements.n} fracture elements")


def _assemble(mesh: FineMesh, elements: FractureElements, params: MaterialParams, model: str,
              excluded: Optional[np.ndarray]) -> BlockSystem:
    _check_params(mesh, elements, params)
    system = BlockSystem(
        model=model,
        A_m=_matrix_tpfa(mesh, params.b_m, excluded),
        A_f=_fracture_tpfa(elements, params.b_f),
        Q=_coupling(elements, params.sigma, mesh.n_cells),
        m_m=params.a_m * mesh.cell_area,
        m_f=params.a_f * elements.length,
        F_m=np.zeros(mesh.n_cells),
        F_f=np.zeros(elements.n),
        params=params,
        mesh=mesh,
        elements=elements,
    )
    logger.info(
        "Assembled %s system: %d matrix + %d fracture DOFs, nnz(A)=%d",
        model.upper(), system.n_matrix, system.n_fracture, system.stiffness.nnz,
    )
    return system


def assemble_dfm(mesh: FineMesh, fractures: FractureGeometry, params: MaterialParams,
                 sources: Optional[SourceSpec] = None, elements: Optional[FractureElements] = None) -> BlockSystem:
    """DFM system: no matrix flux across fracture facets, each fracture facet coupled to both neighbours."""
    if fractures.mode != "dfm":
        raise InputError(f"assemble_dfm needs DFM fractures, got {fractures.mode!r}")
    facets = match_fracture_facets(mesh, fractures)
    if elements is None:
        elements = fracture_elements(mesh, fractures)
    system = _assemble(mesh, elements, params, "dfm", facets)
    return apply_sources(system, sources) if sources else system


def assemble_efm(mesh: FineMesh, fractures: FractureGeometry, params: MaterialParams,
                 sources: Optional[SourceSpec] = None, elements: Optional[FractureElements] = None) -> BlockSystem:
    """EFM system: full matrix TPFA, one fracture DOF per clipped sub-segment coupled to its host cell."""
    if fractures.mode != "efm":
        raise InputError(f"assemble_efm needs EFM fractures, got {fractures.mode!r}")
    if elements is None:
        elements = fracture_elements(mesh, fractures)
    if fractures.n_segments and elements.n == 0:
        raise GeometryError("EFM clip table is empty although fractures are present")
    system = _assemble(mesh, elements, params, "efm", None)
    return apply_sources(system, sources) if sources else system


def assemble(mesh: FineMesh, fractures: FractureGeometry, params: MaterialParams,
             sources: Optional[SourceSpec] = None, elements: Optional[FractureElements] = None) -> BlockSystem:
    if fractures.mode == "dfm":
        return assemble_dfm(mesh, fractures, params, sources, elements)
    return assemble_efm(mesh, fractures, params, sources, elements)


def apply_sources(system: BlockSystem, sources: Optional[SourceSpec], mesh: Optional[FineMesh] = None,
                  elements: Optional[FractureElements] = None) -> BlockSystem:
    """New system with F_m += q|cell| and F_f += q|element| for entities inside each region.

    A region that selects no entity is recorded in ``empty_sources`` and logged.
    """
    mesh = mesh or system.mesh
    elements = elements or system.elements
    F_m = system.F_m.copy()
    F_f = system.F_f.copy()
    empty = []
    domain = mesh.bounds
    for term in sources or ():
        r = term.region
        if r.x1 <= domain.x0 or r.x0 >= domain.x1 or r.y1 <= domain.y0 or r.y0 >= domain.y1:
            raise InputError(f"source {term.name!r}: region {r.as_list()} lies outside the domain")
        if term.target == MATRIX:
            mask = r.contains_half_open(mesh.cell_centroid)
            F_m[mask] += term.rate * mesh.cell_area[mask]
        else:
            mask = r.contains_half_open(elements.midpoint) if elements.n else np.zeros(0, dtype=bool)
            F_f[mask] += term.rate * elements.length[mask]
        if not mask.any():
            logger.warning("Source %r selects no %s entity in %s", term.name, term.target, r.as_list())
            empty.append(term.name)
        else:
            logger.info("Source %r applied to %d %s entities", term.name, int(mask.sum()), term.target)
    return replace(system, F_m=F_m, F_f=F_f, empty_sources=system.empty_sources + tuple(empty))


__all__ = [
    "sigma_from_perms",
    "transmissibility",
    "fracture_transmissibility",
    "fracture_permeability",
    "MaterialParams",
    "SourceTerm",
    "SourceSpec",
    "BlockSystem",
    "assemble_dfm",
    "assemble_efm",
    "assemble",
    "apply_sources",
]
