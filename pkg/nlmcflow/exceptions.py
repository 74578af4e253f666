"""
Exception hierarchy for nlmcflow.

The CLI maps these onto exit codes (see main.py).
"""
from __future__ import annotations


class NlmcError(Exception):
    """Base class of every error raised on purpose by nlmcflow."""


class InputError(NlmcError, ValueError):
    """Malformed input: bad arguments, unparsable files, out-of-domain data."""


class ConfigError(InputError):
    """Invalid or inconsistent experiment configuration."""


class ArtifactError(NlmcError):
    """Outputs of an earlier pipeline stage are missing."""

    def __init__(self, stage: str, path: str) -> None:
        super().__init__(f"missing output of stage '{stage}': {path} (run '{stage}' first)")
        self.stage = stage
        self.path = path


class GeometryError(NlmcError):
    """Mesh or fracture geometry violates an invariant."""


class SolverError(NlmcError):
    """A factorization or solve failed (singular, non-SPD, rank deficient)."""


class AssemblyError(SolverError):
    """The projection matrix could not be assembled from the computed bases."""


__all__ = [
    "NlmcError",
    "InputError",
    "ConfigError",
    "ArtifactError",
    "GeometryError",
    "SolverError",
    "AssemblyError",
]
