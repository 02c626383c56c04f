"""Masked multi-view video pre-training sandbox.

Synthetic multi-view clips with analytic signed distance fields, a
mask-respecting convolutional voxel encoder, a temporal drop-and-reconstruct
decoder, and differentiable SDF volume rendering -- all on a small
self-contained reverse-mode autodiff core.
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
