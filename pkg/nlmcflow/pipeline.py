"""
Experiment pipeline: generate -> solve-fine -> upscale -> solve-coarse -> compare -> report.

Each stage reads the artifacts of the previous ones from ``paths.outputs_dir``
and writes its own; reruns with unchanged inputs reproduce the same files
(wall times go to separate ``timings.yaml`` files).

Output tree:
    geometry/   mesh.txt, permeability.txt, summary.yaml
    fine/       trajectory.csv, summary.yaml, timings.yaml, vtk/
    upscale/sK/ R.txt, A.txt, M.txt, F.txt, dofmap.csv, summary.yaml, timings.yaml
    coarse/sK/  trajectory.csv, summary.yaml, timings.yaml
    compare/    report.csv, report.txt, final_means.csv
    reports/    nlmc_report.pdf, nlmc_report.html
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property
from time import perf_counter
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from . import MATRIX
from .config import ExperimentConfig, _ensure_dirs, _setup_logger, dump_config
from .exceptions import ConfigError
from .fvm import BlockSystem, MaterialParams, SourceSpec, assemble, fracture_permeability
from .generator import generate_case
from .geometry import (
    CoarseGrid,
    FineMesh,
    FractureElements,
    FractureGeometry,
    build_coarse_grid,
    fracture_elements,
    label_networks,
    read_cell_data,
    read_mesh_file,
    write_cell_data,
    write_mesh,
)
from .io import (
    read_summary,
    read_trajectory,
    require,
    write_snapshots,
    write_summary,
    write_table,
    write_trajectory,
)
from .linalg import dump_matrix, dump_vector, is_symmetric, load_matrix, load_vector, zero_row_sum
from .nlmc import (
    CoarseDof,
    CoarseModel,
    ProjectionMatrix,
    assemble_projection,
    build_coarse_model,
    construct_bases,
    dump_basis,
)
from .report_generator import ReportGenerator
from .sim import TimeSpec, fracture_relative_error, relative_error, run, cell_average


STAGES = ("generate", "solve-fine", "upscale", "solve-coarse", "compare", "report")


@dataclass(frozen=True, eq=False)
class Case:
    mesh: FineMesh
    fractures: FractureGeometry
    permeability: Optional[np.ndarray]


class ExperimentPipeline:
    def __init__(self, cfg: ExperimentConfig, base_dir: str = ".") -> None:
        self.cfg = cfg
        self.base_dir = base_dir
        self.out = cfg.paths.outputs_dir
        self.geometry_dir = os.path.join(self.out, "geometry")
        self.fine_dir = os.path.join(self.out, "fine")
        self.compare_dir = os.path.join(self.out, "compare")
        self.reports_dir = os.path.join(self.out, "reports")
        _ensure_dirs([self.out])
        self.logger = _setup_logger(cfg.paths.logs_dir)

    def upscale_dir(self, s: int) -> str:
        return os.path.join(self.out, "upscale", f"s{s}")

    def coarse_dir(self, s: int) -> str:
        return os.path.join(self.out, "coarse", f"s{s}")

    @property
    def time_spec(self) -> TimeSpec:
        t = self.cfg.time
        return TimeSpec(t_max=t.t_max, n_steps=t.n_steps, p0=t.p0)

    # ---------------------- shared state ----------------------
    @cached_property
    def case(self) -> Case:
        mesh_path = require(os.path.join(self.geometry_dir, "mesh.txt"), "generate")
        summary = read_summary(require(os.path.join(self.geometry_dir, "summary.yaml"), "generate"))
        if summary.get("model") != self.cfg.model:
            raise ConfigError(
                f"geometry was generated for model {summary.get('model')!r}, config asks for {self.cfg.model!r}; "
                "run 'generate' again"
            )
        data = read_mesh_file(mesh_path)
        if len(data.segments):
            fractures = label_networks(data.segments, self.cfg.model, data.network_hints, data.fracture_ids)
        else:
            fractures = FractureGeometry.empty(self.cfg.model)
        perm_path = os.path.join(self.geometry_dir, "permeability.txt")
        permeability = read_cell_data(perm_path, data.mesh.n_cells) if os.path.exists(perm_path) else None
        return Case(mesh=data.mesh, fractures=fractures, permeability=permeability)

    @cached_property
    def elements(self) -> FractureElements:
        return fracture_elements(self.case.mesh, self.case.fractures)

    @cached_property
    def system(self) -> BlockSystem:
        p = self.cfg.params
        case = self.case
        k_m = case.permeability if case.permeability is not None else p.k_m
        k_f = fracture_permeability(self.elements, p.k_f, p.k_f_low, p.n_low_fractures, case.fractures.n_fractures)
        params = MaterialParams.from_permeability(
            case.mesh, self.elements, k_m, k_f, p.c_m, p.c_f, p.mu, p.thickness, p.sigma, p.sigma_multiplier
        )
        sources = SourceSpec.from_config(self.cfg.sources)
        return assemble(case.mesh, case.fractures, params, sources, self.elements)

    @cached_property
    def grid(self) -> CoarseGrid:
        c = self.cfg.coarse
        return build_coarse_grid(
            self.case.mesh, self.case.fractures, c.nx, c.ny, domain=self.cfg.geometry.domain, elements=self.elements
        )

    # ---------------------- stages ----------------------
    def generate(self) -> Dict[str, str]:
        g = self.cfg.geometry
        print(f"[NLMC] Generating {self.cfg.model.upper()} geometry ({g.source})")
        if g.source == "generate":
            gen = generate_case(g, self.cfg.model, self.cfg.params.k_m)
            mesh, fractures, permeability = gen.mesh, gen.fractures, gen.permeability
            hints = None
        else:
            data = read_mesh_file(self.cfg.resolve(g.mesh_file, self.base_dir))
            mesh = data.mesh
            if len(data.segments):
                fractures = label_networks(data.segments, self.cfg.model, data.network_hints, data.fracture_ids)
            else:
                fractures = FractureGeometry.empty(self.cfg.model)
            hints = data.network_hints if len(data.segments) else None
            permeability = None
            if g.permeability_file:
                permeability = read_cell_data(self.cfg.resolve(g.permeability_file, self.base_dir), mesh.n_cells)

        _ensure_dirs([self.geometry_dir])
        paths = {"mesh": write_mesh(os.path.join(self.geometry_dir, "mesh.txt"), mesh, fractures, hints)}
        perm_path = os.path.join(self.geometry_dir, "permeability.txt")
        if permeability is not None:
            paths["permeability"] = write_cell_data(perm_path, permeability)
        elif os.path.exists(perm_path):
            os.remove(perm_path)
        paths["summary"] = write_summary(os.path.join(self.geometry_dir, "summary.yaml"), {
            "model": self.cfg.model,
            "domain": mesh.bounds.as_list(),
            "n_cells": mesh.n_cells,
            "n_facets": mesh.n_facets,
            "n_fractures": fractures.n_fractures,
            "n_segments": fractures.n_segments,
            "n_networks": fractures.n_networks,
            "total_fracture_length": float(fractures.lengths.sum()),
            "heterogeneous": permeability is not None,
            "seed": g.seed,
        })
        paths["config"] = self._write_text(os.path.join(self.out, "config.yaml"), dump_config(self.cfg))
        for name in ("case", "elements", "system", "grid"):
            self.__dict__.pop(name, None)
        self.logger.info("Geometry written: %s", paths)
        print(f"[NLMC] Geometry: {mesh.n_cells} cells, {fractures.n_segments} fracture segments, "
              f"{fractures.n_networks} networks")
        return paths

    def solve_fine(self) -> Dict[str, Any]:
        print("[NLMC] Solving fine-scale model")
        system = self.system
        start = perf_counter()
        trajectory = run(system, self.time_spec)
        wall = perf_counter() - start
        _ensure_dirs([self.fine_dir])
        write_trajectory(os.path.join(self.fine_dir, "trajectory.csv"), trajectory)
        summary = {
            "model": system.model,
            "dof_f": system.n_dofs,
            "n_matrix": system.n_matrix,
            "n_fracture": system.n_fracture,
            "n_steps": self.cfg.time.n_steps,
            "tau": self.time_spec.tau,
            "source_total": float(system.rhs.sum()),
            "empty_sources": list(system.empty_sources),
            "symmetric": is_symmetric(system.stiffness),
        }
        write_summary(os.path.join(self.fine_dir, "summary.yaml"), summary)
        write_summary(os.path.join(self.fine_dir, "timings.yaml"), {"solve_seconds": wall})
        if self.cfg.debug.vtk:
            steps = sorted(set(self.cfg.time.snapshots) | {0})
            write_snapshots(os.path.join(self.fine_dir, "vtk"), system.mesh, system.elements, trajectory, steps)
        if self.cfg.debug.dump_matrices:
            dump_matrix(os.path.join(self.fine_dir, "A.txt"), system.stiffness)
            dump_vector(os.path.join(self.fine_dir, "F.txt"), system.rhs)
        self.logger.info("Fine solve: DOF_f=%d in %.3fs", system.n_dofs, wall)
        print(f"[NLMC] Fine solve complete: DOF_f={system.n_dofs}, {wall:.2f}s")
        return {**summary, "solve_seconds": wall}

    def upscale(self) -> Dict[int, Dict[str, Any]]:
        system, grid = self.system, self.grid
        u = self.cfg.upscaling
        results = {}
        for s in u.layers:
            print(f"[NLMC] Building NLMC bases for s={s}")
            start = perf_counter()
            bases = construct_bases(system, grid, s, n_jobs=u.n_jobs, regularization=u.regularization)
            projection = assemble_projection(bases.bases, grid, system.n_matrix, system.n_fracture)
            model = build_coarse_model(projection, system, u.mass, u.rhs, u.row_sum_correction, grid)
            wall = perf_counter() - start

            d = self.upscale_dir(s)
            _ensure_dirs([d])
            dump_matrix(os.path.join(d, "R.txt"), projection.R)
            dump_matrix(os.path.join(d, "A.txt"), model.stiffness)
            dump_matrix(os.path.join(d, "M.txt"), model.mass)
            dump_vector(os.path.join(d, "F.txt"), model.rhs)
            write_table(os.path.join(d, "dofmap.csv"), projection.dof_frame())
            row_sums = np.abs(model.stiffness @ np.ones(model.n_dofs))
            summary = {
                "layers": int(s),
                "dof_c": model.n_dofs,
                "n_coarse_cells": grid.n_cells,
                "n_fragments": grid.n_fragments,
                "n_bases": len(bases),
                "max_constraint_residual": bases.max_constraint_residual,
                "max_flow_residual": bases.max_flow_residual,
                "mass": u.mass,
                "rhs": u.rhs,
                "row_sum_correction": u.row_sum_correction,
                "max_row_sum": float(row_sums.max()) if len(row_sums) else 0.0,
            }
            write_summary(os.path.join(d, "summary.yaml"), summary)
            write_summary(os.path.join(d, "timings.yaml"), {"upscale_seconds": wall})
            if self.cfg.debug.dump_bases:
                basis_dir = os.path.join(d, "bases")
                _ensure_dirs([basis_dir])
                for b in bases:
                    dump_basis(basis_dir, b, system.n_dofs)
            self.logger.info("Upscaled s=%s: DOF_c=%d in %.3fs", s, model.n_dofs, wall)
            print(f"[NLMC] s={s}: DOF_c={model.n_dofs}, max constraint residual "
                  f"{bases.max_constraint_residual:.2e}, {wall:.2f}s")
            results[int(s)] = {**summary, "upscale_seconds": wall}
        return results

    def load_coarse_model(self, s: int) -> CoarseModel:
        d = self.upscale_dir(s)
        stage = "upscale"
        R = load_matrix(require(os.path.join(d, "R.txt"), stage))
        A = load_matrix(require(os.path.join(d, "A.txt"), stage))
        M = load_matrix(require(os.path.join(d, "M.txt"), stage))
        F = load_vector(require(os.path.join(d, "F.txt"), stage))
        frame = pd.read_csv(require(os.path.join(d, "dofmap.csv"), stage))
        dof_map = tuple(
            CoarseDof(int(r.cell), str(r.continuum), int(r.network), float(r.measure)) for r in frame.itertuples()
        )
        summary = read_summary(require(os.path.join(d, "summary.yaml"), stage))
        corrected = bool(summary.get("row_sum_correction", True))
        if corrected:
            # text dumps come back in sorted order; restore the exact zero row sums
            A = zero_row_sum(A)
        projection = ProjectionMatrix(
            R=R,
            dof_map=dof_map,
            n_coarse_matrix=sum(1 for x in dof_map if x.continuum == MATRIX),
            n_matrix=self.case.mesh.n_cells,
            layers=int(s),
        )
        return CoarseModel(
            stiffness=A,
            mass=M,
            rhs=F,
            projection=projection,
            mass_mode=summary.get("mass", "galerkin"),
            rhs_mode=summary.get("rhs", "galerkin"),
            row_sum_correction=corrected,
        )

    def solve_coarse(self) -> Dict[int, Dict[str, Any]]:
        results = {}
        for s in self.cfg.upscaling.layers:
            print(f"[NLMC] Solving coarse model s={s}")
            model = self.load_coarse_model(s)
            start = perf_counter()
            trajectory = run(model, self.time_spec)
            wall = perf_counter() - start
            d = self.coarse_dir(s)
            _ensure_dirs([d])
            write_trajectory(os.path.join(d, "trajectory.csv"), trajectory)
            summary = {"layers": int(s), "dof_c": model.n_dofs, "n_steps": self.cfg.time.n_steps}
            write_summary(os.path.join(d, "summary.yaml"), summary)
            write_summary(os.path.join(d, "timings.yaml"), {"solve_seconds": wall})
            self.logger.info("Coarse solve s=%s: DOF_c=%d in %.3fs", s, model.n_dofs, wall)
            results[int(s)] = {**summary, "solve_seconds": wall}
        return results

    def compare(self) -> pd.DataFrame:
        print("[NLMC] Comparing coarse solutions with fine cell averages")
        grid = self.grid
        n_matrix = self.case.mesh.n_cells
        fine = read_trajectory(require(os.path.join(self.fine_dir, "trajectory.csv"), "solve-fine"), n_matrix)
        fine_summary = read_summary(require(os.path.join(self.fine_dir, "summary.yaml"), "solve-fine"))
        fine_time = read_summary(require(os.path.join(self.fine_dir, "timings.yaml"), "solve-fine"))
        final = self.cfg.time.n_steps
        means = pd.DataFrame({"cell": np.arange(grid.n_cells), "fine": cell_average(fine.matrix(final), grid)})

        rows: List[Dict[str, Any]] = []
        for s in self.cfg.upscaling.layers:
            d = self.coarse_dir(s)
            coarse = read_trajectory(require(os.path.join(d, "trajectory.csv"), "solve-coarse"), grid.n_cells)
            coarse_summary = read_summary(require(os.path.join(d, "summary.yaml"), "solve-coarse"))
            coarse_time = read_summary(require(os.path.join(d, "timings.yaml"), "solve-coarse"))
            for k in self.cfg.time.snapshots:
                rows.append({
                    "s": int(s),
                    "step": int(k),
                    "time": float(fine.times[k]),
                    "matrix_error_pct": 100.0 * relative_error(fine.matrix(k), coarse.matrix(k), grid),
                    "fracture_error_pct": 100.0 * fracture_relative_error(fine.fracture(k), coarse.fracture(k), grid),
                    "dof_f": int(fine_summary["dof_f"]),
                    "dof_c": int(coarse_summary["dof_c"]),
                    "fine_seconds": float(fine_time["solve_seconds"]),
                    "coarse_seconds": float(coarse_time["solve_seconds"]),
                })
            means[f"s{s}"] = coarse.matrix(final)

        table = pd.DataFrame(rows, columns=[
            "s", "step", "time", "matrix_error_pct", "fracture_error_pct",
            "dof_f", "dof_c", "fine_seconds", "coarse_seconds",
        ])
        _ensure_dirs([self.compare_dir])
        write_table(os.path.join(self.compare_dir, "report.csv"), table)
        write_table(os.path.join(self.compare_dir, "final_means.csv"), means)
        self._write_text(os.path.join(self.compare_dir, "report.txt"), format_table(table) + "\n")
        self.logger.info("Comparison table written with %d rows", len(table))
        print(format_table(table))
        return table

    def report(self) -> Dict[str, str]:
        print("[NLMC] Generating reports")
        table = pd.read_csv(require(os.path.join(self.compare_dir, "report.csv"), "compare"))
        means = pd.read_csv(require(os.path.join(self.compare_dir, "final_means.csv"), "compare"))
        geometry = read_summary(require(os.path.join(self.geometry_dir, "summary.yaml"), "generate"))
        meta = {
            "name": self.cfg.name,
            "model": self.cfg.model.upper(),
            "coarse_grid": f"{self.cfg.coarse.nx} x {self.cfg.coarse.ny}",
            "mass": self.cfg.upscaling.mass,
            "rhs": self.cfg.upscaling.rhs,
            "fine_cells": geometry.get("n_cells"),
            "fracture_segments": geometry.get("n_segments"),
            "networks": geometry.get("n_networks"),
        }
        generator = ReportGenerator(self.reports_dir, self.cfg.paths.logs_dir)
        paths = generator.generate_reports(table, means, meta, (self.cfg.coarse.nx, self.cfg.coarse.ny))
        print(f"[NLMC] Reports generated: {paths}")
        return paths

    def run(self, stage: str) -> Any:
        if stage == "all":
            results = {}
            for name in STAGES:
                results[name] = self.run(name)
            return results
        handlers = {
            "generate": self.generate,
            "solve-fine": self.solve_fine,
            "upscale": self.upscale,
            "solve-coarse": self.solve_coarse,
            "compare": self.compare,
            "report": self.report,
        }
        if stage not in handlers:
            raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES + ('all',)}")
        return handlers[stage]()

    @staticmethod
    def _write_text(path: str, text: str) -> str:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path


def format_table(table: pd.DataFrame) -> str:
    """Aligned text rendering of the comparison table (errors in percent)."""
    view = table.copy()
    for col in ("matrix_error_pct", "fracture_error_pct"):
        view[col] = view[col].map(lambda v: f"{v:.4f}")
    view["time"] = view["time"].map(lambda v: f"{v:.4g}")
    for col in ("fine_seconds", "coarse_seconds"):
        view[col] = view[col].map(lambda v: f"{v:.3f}")
    return view.to_string(index=False)


__all__ = ["STAGES", "Case", "ExperimentPipeline", "format_table"]
