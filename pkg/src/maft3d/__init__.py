"""Desk-scale 3D instance segmentation with position-query transformer decoders.

Submodules are imported lazily by callers (``maft3d.decoder``, ``maft3d.scene``,
...) so that the CLI can pin BLAS/numba thread counts before numpy loads.
"""

__version__ = "0.1.0"
