"""
NLMC Experiment Orchestrator

Usage:
  python main.py <generate|solve-fine|upscale|solve-coarse|compare|report|all> \
      --config config/experiment.yaml [--out outputs] [--layers 1,2,3] [--model efm] \
      [--mass galerkin] [--seed 7]

Exit codes: 0 success, 1 unexpected failure, 2 config/input/missing artifact,
3 geometry, 4 solver.
"""
from __future__ import annotations

import argparse
import os
import sys
import traceback
from typing import Any, Dict, List, Optional

from nlmcflow.config import DEFAULT_CONFIG_PATH, MASS_MODES, MODELS, _setup_logger, load_config
from nlmcflow.exceptions import GeometryError, InputError, NlmcError, SolverError
from nlmcflow.pipeline import STAGES, ExperimentPipeline


EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INPUT = 2
EXIT_GEOMETRY = 3
EXIT_SOLVER = 4


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    if args.out:
        out.setdefault("paths", {})["outputs_dir"] = args.out
    if args.layers:
        out.setdefault("upscaling", {})["layers"] = args.layers
    if args.mass:
        out.setdefault("upscaling", {})["mass"] = args.mass
    if args.model:
        out["model"] = args.model
    if args.seed is not None:
        out.setdefault("geometry", {})["seed"] = args.seed
    return out


def exit_code_for(error: BaseException) -> int:
    # GeometryError and SolverError derive from NlmcError but not from InputError
    if isinstance(error, GeometryError):
        return EXIT_GEOMETRY
    if isinstance(error, SolverError):
        return EXIT_SOLVER
    if isinstance(error, (InputError, NlmcError)):
        return EXIT_INPUT
    return EXIT_UNEXPECTED


def orchestrate(stage: str, args: argparse.Namespace) -> int:
    # Until the config names its logs directory, failures go to ./logs
    logs_dir = "logs"
    try:
        config_path = args.config or DEFAULT_CONFIG_PATH
        cfg = load_config(config_path, _overrides(args))
        logs_dir = cfg.paths.logs_dir
        logger = _setup_logger(logs_dir)
        logger.info("Stage %s for %s (config %s)", stage, cfg.name, config_path)
        pipeline = ExperimentPipeline(cfg, base_dir=os.path.dirname(os.path.abspath(config_path)))
        print(f"[NLMC] Running stage '{stage}' for {cfg.name} ({cfg.model.upper()})")
        pipeline.run(stage)
        return EXIT_OK
    except NlmcError as e:
        logger = _setup_logger(logs_dir)
        logger.error("Stage %s failed: %s", stage, e)
        print(f"[NLMC] ERROR: {e}")
        return exit_code_for(e)
    except Exception as e:
        logger = _setup_logger(logs_dir)
        logger.exception("Main orchestration failed: %s\n%s", e, traceback.format_exc())
        print(f"[NLMC] ERROR: {e}")
        return EXIT_UNEXPECTED


def _layers(text: str) -> List[int]:
    try:
        layers = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"layers must be comma-separated integers: {text!r}")
    if not layers or any(s < 1 for s in layers):
        raise argparse.ArgumentTypeError(f"layers must be integers >= 1: {text!r}")
    return layers


def parse_args(argv: Optional[List[str]]) -> argparse.Namespace:
    p = argparse.ArgumentParser(description="NLMC upscaling experiments for fractured porous media")
    p.add_argument("stage", choices=list(STAGES) + ["all"], help="Which pipeline stage to run")
    p.add_argument("--config", default=None, help=f"Experiment YAML (default: {DEFAULT_CONFIG_PATH})")
    p.add_argument("--out", default=None, help="Override paths.outputs_dir")
    p.add_argument("--layers", type=_layers, default=None, help="Oversampling sizes, e.g. 1,2,3")
    p.add_argument("--model", choices=MODELS, default=None, help="Fine-scale fracture model")
    p.add_argument("--mass", choices=MASS_MODES, default=None, help="Coarse mass matrix mode")
    p.add_argument("--seed", type=int, default=None, help="Override geometry.seed")
    return p.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    return orchestrate(args.stage, args)


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
