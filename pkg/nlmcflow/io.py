"""
Artifact files for the experiment pipeline.

- Trajectories as long CSV tables (``step,time,dof_id,value``) via pandas
- YAML summaries (deterministic key order, no timestamps)
- Legacy ASCII VTK snapshots via meshio: matrix pressure on triangles,
  fracture pressure on one line cell per fracture element
"""
from __future__ import annotations

import os
import logging
from typing import Any, Dict, Optional

import meshio
import numpy as np
import pandas as pd
import yaml

from .exceptions import ArtifactError, InputError
from .geometry import FineMesh, FractureElements
from .sim import Trajectory


logger = logging.getLogger("nlmcflow.io")

FLOAT_FORMAT = "%.17g"


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def require(path: str, stage: str) -> str:
    """Return ``path`` if it exists, else raise ``ArtifactError`` naming the producing stage."""
    if not os.path.exists(path):
        raise ArtifactError(stage, path)
    return path


def write_trajectory(path: str, trajectory: Trajectory) -> str:
    _ensure_parent(path)
    trajectory.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("Trajectory written: %s", path)
    return path


def read_trajectory(path: str, n_matrix: int) -> Trajectory:
    return Trajectory.from_frame(pd.read_csv(path), n_matrix)


def write_table(path: str, df: pd.DataFrame) -> str:
    _ensure_parent(path)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_summary(path: str, data: Dict[str, Any]) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(_plain(data), f, sort_keys=False, default_flow_style=False)
    return path


def read_summary(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise InputError(f"{path}: summary must be a mapping")
    return data


def _plain(value):
    """numpy scalars/arrays to built-in types so YAML stays portable."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_vtk(path: str, mesh: FineMesh, p_matrix: np.ndarray, elements: Optional[FractureElements] = None,
              p_fracture: Optional[np.ndarray] = None) -> str:
    """One legacy ASCII VTK file with triangle (matrix) and line (fracture) cells."""
    points = np.column_stack([mesh.vertices, np.zeros(mesh.n_vertices)])
    cells = [meshio.CellBlock("triangle", mesh.cells)]
    pressure = [np.asarray(p_matrix, dtype=float)]
    continuum = [np.zeros(mesh.n_cells, dtype=np.int64)]
    if elements is not None and elements.n:
        ends = elements.endpoints.reshape(-1, 2)
        points = np.vstack([points, np.column_stack([ends, np.zeros(len(ends))])])
        lines = mesh.n_vertices + np.arange(2 * elements.n).reshape(-1, 2)
        cells.append(meshio.CellBlock("line", lines))
        pf = np.zeros(elements.n) if p_fracture is None else np.asarray(p_fracture, dtype=float)
        pressure.append(pf)
        continuum.append(np.ones(elements.n, dtype=np.int64))
    out = meshio.Mesh(points, cells, cell_data={"pressure": pressure, "continuum": continuum})
    _ensure_parent(path)
    meshio.write(path, out, file_format="vtk", binary=False)
    return path


def write_snapshots(directory: str, mesh: FineMesh, elements: FractureElements, trajectory: Trajectory,
                    steps) -> list:
    paths = []
    for k in steps:
        path = os.path.join(directory, f"pressure_{k:04d}.vtk")
        paths.append(write_vtk(path, mesh, trajectory.matrix(k), elements, trajectory.fracture(k)))
    logger.info("VTK snapshots written: %d files in %s", len(paths), directory)
    return paths


__all__ = [
    "require",
    "write_trajectory",
    "read_trajectory",
    "write_table",
    "write_summary",
    "read_summary",
    "write_vtk",
    "write_snapshots",
]
