"""
Synthetic geometries: random EFM fracture sets, facet-lattice DFM fractures and
heterogeneous matrix permeability fields.

Every generator takes an explicit seed and draws from ``np.random.default_rng``,
so a (config, seed) pair always produces the same geometry.
"""
from __future__ import annotations

import math
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import GeometryError, InputError
from .geometry import FineMesh, FractureGeometry, Rectangle, generate_structured_mesh, label_networks


logger = logging.getLogger("nlmcflow.generator")

# Attempts per requested fracture before giving up
MAX_ATTEMPTS = 1000

# Lattice directions available on the diagonal-split structured mesh
LATTICE_DIRECTIONS = ((1, 0), (0, 1), (1, 1))


def random_fractures(n: int, domain: Rectangle, length_min: float, length_max: float, seed: int,
                     anchors: Sequence[Sequence[float]] = ()) -> np.ndarray:
    """``n`` straight fractures with uniform midpoints, orientations and lengths.

    Candidates leaving the domain are rejected. The first ``len(anchors)``
    fractures have their midpoints pinned at the anchor points.
    """
    if n < 0:
        raise InputError(f"fracture count must be >= 0, got {n}")
    if not 0 < length_min <= length_max:
        raise InputError("fracture lengths must satisfy 0 < length_min <= length_max")
    rng = np.random.default_rng(seed)
    lo = np.array([domain.x0, domain.y0])
    hi = np.array([domain.x1, domain.y1])
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > MAX_ATTEMPTS * n:
            raise GeometryError(
                f"could not place {n} fractures of length [{length_min}, {length_max}] in {domain.as_list()}"
            )
        k = len(out)
        mid = np.asarray(anchors[k], dtype=float) if k < len(anchors) else rng.uniform(lo, hi)
        theta = rng.uniform(0.0, math.pi)
        half = 0.5 * rng.uniform(length_min, length_max) * np.array([math.cos(theta), math.sin(theta)])
        seg = np.array([mid - half, mid + half])
        if np.all(domain.contains(seg)):
            out.append(seg)
    return np.array(out, dtype=float).reshape(-1, 2, 2)


def lattice_fractures(n: int, nx_: int, ny_: int, domain: Rectangle, length_min: float, length_max: float,
                      seed: int, anchors: Sequence[Sequence[float]] = ()) -> Tuple[np.ndarray, np.ndarray]:
    """Fractures made of structured-mesh facets, for conforming DFM runs.

    Each fracture is a straight chain of facets along one of the lattice
    directions (horizontal, vertical, quad diagonal). Chains that leave the
    mesh or reuse a facet are rejected. Returns the facet segments and the
    fracture id of each segment.
    """
    if n < 0:
        raise InputError(f"fracture count must be >= 0, got {n}")
    rng = np.random.default_rng(seed)
    xs = np.linspace(domain.x0, domain.x1, nx_ + 1)
    ys = np.linspace(domain.y0, domain.y1, ny_ + 1)
    hx, hy = domain.width / nx_, domain.height / ny_
    used = set()
    segments, fracture_ids = [], []
    placed = 0
    attempts = 0
    while placed < n:
        attempts += 1
        if attempts > MAX_ATTEMPTS * n:
            raise GeometryError(
                f"infeasible DFM lattice request: {n} non-overlapping facet chains on a {nx_}x{ny_} mesh"
            )
        dx, dy = LATTICE_DIRECTIONS[rng.integers(len(LATTICE_DIRECTIONS))]
        step = math.hypot(dx * hx, dy * hy)
        m = max(1, int(round(rng.uniform(length_min, length_max) / step)))
        if placed < len(anchors):
            ax, ay = anchors[placed]
            i0 = int(round((ax - domain.x0) / hx - 0.5 * m * dx))
            j0 = int(round((ay - domain.y0) / hy - 0.5 * m * dy))
        else:
            i0 = int(rng.integers(0, nx_ + 1))
            j0 = int(rng.integers(0, ny_ + 1))
        if not (0 <= i0 and 0 <= j0 and i0 + m * dx <= nx_ and j0 + m * dy <= ny_):
            continue
        chain = [((i0 + t * dx, j0 + t * dy), (i0 + (t + 1) * dx, j0 + (t + 1) * dy)) for t in range(m)]
        if any(edge in used for edge in chain):
            continue
        used.update(chain)
        for (ia, ja), (ib, jb) in chain:
            segments.append([[xs[ia], ys[ja]], [xs[ib], ys[jb]]])
            fracture_ids.append(placed)
        placed += 1
    return np.array(segments, dtype=float).reshape(-1, 2, 2), np.array(fracture_ids, dtype=np.int64)


def lognormal_permeability(nx_: int, ny_: int, k_mean: float, log_std: float, correlation_length: float,
                           domain: Rectangle, seed: int) -> np.ndarray:
    """Per-cell k_m = k_mean * exp(g), g a smoothed Gaussian field with std ``log_std``.

    Values are constant per structured quad, so both triangles of a quad share one value.
    """
    if k_mean <= 0 or log_std < 0 or correlation_length <= 0:
        raise InputError("log-normal field needs k_mean > 0, log_std >= 0, correlation_length > 0")
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((ny_, nx_))
    sigma_px = (correlation_length * ny_ / domain.height, correlation_length * nx_ / domain.width)
    field = gaussian_filter(white, sigma=sigma_px, mode="wrap")
    std = field.std()
    field = (field - field.mean()) / (std if std > 0 else 1.0) * log_std
    return np.repeat(k_mean * np.exp(field).ravel(), 2)


@dataclass(frozen=True, eq=False)
class GeneratedCase:
    mesh: FineMesh
    fractures: FractureGeometry
    permeability: Optional[np.ndarray]


def generate_case(geometry_cfg, model: str, k_m: float) -> GeneratedCase:
    """Mesh, fractures and (optionally) a k_m field from a ``GeometryConfig``."""
    g = geometry_cfg
    domain = Rectangle.from_bounds(g.domain)
    mesh = generate_structured_mesh(g.fine_nx, g.fine_ny, domain)
    if g.n_fractures == 0:
        fractures = FractureGeometry.empty(model)
    elif model == "dfm":
        segments, fids = lattice_fractures(
            g.n_fractures, g.fine_nx, g.fine_ny, domain, g.length_min, g.length_max, g.seed, g.anchors
        )
        fractures = label_networks(segments, mode="dfm", fracture_ids=fids)
    else:
        segments = random_fractures(g.n_fractures, domain, g.length_min, g.length_max, g.seed, g.anchors)
        fractures = label_networks(segments, mode="efm")
    permeability = None
    if g.heterogeneous:
        permeability = lognormal_permeability(
            g.fine_nx, g.fine_ny, k_m, g.log_k_std, g.correlation_length, domain, g.seed + 1
        )
    logger.info(
        "Generated %s case: %d cells, %d fractures, %d segments, %d networks",
        model.upper(), mesh.n_cells, fractures.n_fractures, fractures.n_segments, fractures.n_networks,
    )
    return GeneratedCase(mesh=mesh, fractures=fractures, permeability=permeability)


__all__ = [
    "random_fractures",
    "lattice_fractures",
    "lognormal_permeability",
    "GeneratedCase",
    "generate_case",
]
