"""Conditional multi-view ancestral sampling (cMAS) for 2D-to-3D human pose lifting.

Subpackages are imported lazily by the caller; importing :mod:`cmas` itself
does not pull in numpy, so entry points can pin BLAS threading first.
"""

__version__ = "0.1.0"

__all__ = [
    "skeleton",
    "camera",
    "diffusion",
    "prior",
    "triangulate",
    "sampler",
    "preprocess",
    "evaluate",
    "cli",
]
