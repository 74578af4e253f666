"""
Implicit-Euler time stepping and accuracy metrics.

    (M / tau + A) p = M p_prev / tau + F

solved as (M / tau + A) dp = F - A p_prev for the increment dp = p - p_prev,
so a state that balances its sources is left unchanged.

The same stepper drives the fine ``BlockSystem`` and the upscaled
``CoarseModel``; both expose ``stiffness``, ``mass``, ``rhs`` and ``n_matrix``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .exceptions import InputError, SolverError
from .fvm import BlockSystem, SourceSpec, apply_sources
from .geometry import CoarseGrid
from .linalg import DenseFactor, LuFactor, SpdFactor


logger = logging.getLogger("nlmcflow.sim")

# Operators in this size range with at least this fill are factorized densely
DENSE_MIN_DOFS = 100
DENSE_MAX_DOFS = 5000
DENSE_FILL = 0.05


@dataclass(frozen=True)
class TimeSpec:
    t_max: float
    n_steps: int
    p0: float = 1.0

    def __post_init__(self) -> None:
        if not self.t_max > 0:
            raise InputError(f"t_max must be > 0, got {self.t_max}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InputError(f"n_steps must be an integer >= 1, got {self.n_steps}")

    @property
    def tau(self) -> float:
        return self.t_max / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(self.n_steps + 1)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States at steps 0..n_steps; columns are matrix DOFs, then fracture DOFs."""

    times: np.ndarray
    states: np.ndarray
    n_matrix: int

    def __len__(self) -> int:
        return len(self.times)

    def state(self, step: int) -> np.ndarray:
        if not 0 <= step < len(self):
            raise InputError(f"step {step} outside trajectory of {len(self)} states")
        return self.states[step]

    def matrix(self, step: int) -> np.ndarray:
        return self.state(step)[:self.n_matrix]

    def fracture(self, step: int) -> np.ndarray:
        return self.state(step)[self.n_matrix:]

    def to_frame(self) -> pd.DataFrame:
        """Long table ``step, time, dof_id, value``."""
        n_steps, n_dofs = self.states.shape
        return pd.DataFrame({
            "step": np.repeat(np.arange(n_steps), n_dofs),
            "time": np.repeat(self.times, n_dofs),
            "dof_id": np.tile(np.arange(n_dofs), n_steps),
            "value": self.states.ravel(),
        })

    @classmethod
    def from_frame(cls, df: pd.DataFrame, n_matrix: int) -> "Trajectory":
        missing = {"step", "time", "dof_id", "value"} - set(df.columns)
        if missing:
            raise InputError(f"trajectory table lacks columns {sorted(missing)}")
        df = df.sort_values(["step", "dof_id"], kind="stable")
        steps = df["step"].unique()
        states = df["value"].to_numpy(dtype=float).reshape(len(steps), -1)
        times = df.groupby("step", sort=True)["time"].first().to_numpy(dtype=float)
        return cls(times=times, states=states, n_matrix=int(n_matrix))


def _system_matrix(M, A, tau: float) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    M = sp.diags(np.asarray(M, dtype=float)) if np.ndim(M) == 1 else sp.csr_matrix(M)
    return (M / tau + sp.csr_matrix(A)).tocsr(), M.tocsr()


class ImplicitEuler:
    """Factorizes M/tau + A once and advances states.

    Nearly dense operators of moderate size use ``DenseFactor``. Otherwise the
    symmetric positive definite factorization is tried first; operators that are
    not SPD (e.g. a coarse operator with negative Schur pivots) fall back to LU.
    """

    def __init__(self, M, A, F: np.ndarray, tau: float) -> None:
        if not tau > 0:
            raise InputError(f"time step must be > 0, got {tau}")
        self.tau = float(tau)
        self.K, self.M = _system_matrix(M, A, self.tau)
        self.A = sp.csr_matrix(A, dtype=float)
        self.F = np.asarray(F, dtype=float)
        if self.F.shape != (self.K.shape[0],):
            raise InputError(f"right-hand side has shape {self.F.shape}, system has {self.K.shape[0]} DOFs")
        n = self.K.shape[0]
        if DENSE_MIN_DOFS <= n <= DENSE_MAX_DOFS and self.K.nnz >= DENSE_FILL * n * n:
            self.factor = DenseFactor(self.K)
            logger.info("Dense %s factorization of %d DOFs (fill %.2f)",
                        "Cholesky" if self.factor.cholesky else "LU", n, self.K.nnz / n / n)
            return
        try:
            self.factor = SpdFactor(self.K)
        except SolverError as e:
            logger.warning("SPD factorization unavailable (%s); falling back to LU", e)
            self.factor = LuFactor(self.K)

    def step(self, p_prev: np.ndarray) -> np.ndarray:
        p_prev = np.asarray(p_prev, dtype=float)
        result = self.factor.solve(self.F - self.A @ p_prev)
        if not np.all(np.isfinite(result.x)):
            raise SolverError("implicit step produced non-finite values (singular system)")
        return p_prev + result.x


def step_implicit(M, A, F: np.ndarray, p_prev: np.ndarray, tau: float) -> np.ndarray:
    """One implicit-Euler step."""
    return ImplicitEuler(M, A, F, tau).step(np.asarray(p_prev, dtype=float))


def run(model, time: TimeSpec, sources: Optional[SourceSpec] = None) -> Trajectory:
    """Trajectory of ``time.n_steps`` steps from the uniform state ``time.p0``.

    ``sources`` are applied to a fine ``BlockSystem``; a coarse model already
    carries its upscaled right-hand side.
    """
    if sources:
        if not isinstance(model, BlockSystem):
            raise InputError("sources can only be applied to a fine block system")
        model = apply_sources(model, sources)
    stepper = ImplicitEuler(model.mass, model.stiffness, model.rhs, time.tau)
    states = np.empty((time.n_steps + 1, model.stiffness.shape[0]))
    states[0] = time.p0
    for k in range(1, time.n_steps + 1):
        try:
            states[k] = stepper.step(states[k - 1])
        except SolverError as e:
            raise SolverError(f"time step {k}: {e}") from e
    logger.info("Ran %d implicit steps (tau=%.4g) on %d DOFs", time.n_steps, time.tau, states.shape[1])
    return Trajectory(times=time.times, states=states, n_matrix=model.n_matrix)


def mass_total(model, state: np.ndarray) -> float:
    """1^T M p: total stored fluid for the state."""
    return float(np.sum(model.mass @ np.asarray(state, dtype=float)))


# ---------------------- Metrics ----------------------
def cell_average(p_matrix: np.ndarray, grid: CoarseGrid) -> np.ndarray:
    """Area-weighted mean of fine cell values over each coarse cell."""
    p = np.asarray(p_matrix, dtype=float)
    area = grid.fine_area
    num = np.bincount(grid.cell_of_fine, weights=area * p, minlength=grid.n_cells)
    den = np.bincount(grid.cell_of_fine, weights=area, minlength=grid.n_cells)
    return num / den


def fragment_average(p_fracture: np.ndarray, grid: CoarseGrid) -> np.ndarray:
    """Length-weighted mean of fine fracture values over each fragment."""
    p = np.asarray(p_fracture, dtype=float)
    length = grid.elements.length
    return np.array([np.dot(length[f.elements], p[f.elements]) / f.measure for f in grid.fragments])


def relative_l2(reference: np.ndarray, approx: np.ndarray) -> float:
    ref = np.asarray(reference, dtype=float)
    den = float(np.sum(ref ** 2))
    if den == 0.0:
        raise InputError("relative error undefined for an all-zero reference")
    return float(np.sqrt(np.sum((ref - np.asarray(approx, dtype=float)) ** 2) / den))


def relative_error(p_fine: np.ndarray, p_coarse: np.ndarray, grid: CoarseGrid) -> float:
    """Relative L2 difference between fine cell averages and coarse matrix means (a fraction, not percent)."""
    return relative_l2(cell_average(p_fine[:len(grid.cell_of_fine)], grid), p_coarse[:grid.n_cells])


def fracture_relative_error(p_fine_fracture: np.ndarray, p_coarse_fracture: np.ndarray, grid: CoarseGrid) -> float:
    if grid.n_fragments == 0:
        return 0.0
    return relative_l2(fragment_average(p_fine_fracture, grid), p_coarse_fracture[:grid.n_fragments])


__all__ = [
    "TimeSpec",
    "Trajectory",
    "ImplicitEuler",
    "step_implicit",
    "run",
    "mass_total",
    "cell_average",
    "fragment_average",
    "relative_l2",
    "relative_error",
    "fracture_relative_error",
]
