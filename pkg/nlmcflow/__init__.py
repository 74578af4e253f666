"""
nlmcflow package initializer.

Fine-grid DFM/EFM flow in fractured porous media and its non-local
multi-continuum (NLMC) upscaled coarse model.
"""

__all__ = [
    "__version__",
    "MATRIX",
    "FRACTURE",
    "BOUNDARY",
]

__version__ = "1.0.0"

# Continuum labels shared by the assembly, the coarse DOF map and the outputs.
MATRIX = "matrix"
FRACTURE = "fracture"

# Neighbour index used for facets on the domain boundary.
BOUNDARY = -1
