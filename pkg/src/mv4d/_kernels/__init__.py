"""Kernel backend selection.

The hot inner loops (convolution, bilinear/trilinear sampling, scatter-add)
are available both as a compiled Cython extension and as pure-numpy
reference code.  The compiled core is preferred when importable; set
MV4D_KERNELS=ref or MV4D_KERNELS=fast to force a backend.

``benchmarks/bench_kernels.py`` times the two backends side by side.
"""

import os

from . import _ref

_choice = os.environ.get("MV4D_KERNELS", "auto")

if _choice == "ref":
    _impl = _ref
elif _choice in ("auto", "fast"):
    try:
        from . import _fast as _impl
    except ImportError:
        if _choice == "fast":
            raise ImportError(
                "MV4D_KERNELS=fast requested but the compiled extension is "
                "not available; reinstall with a working C toolchain"
            )
        _impl = _ref
else:
    raise ValueError(f"MV4D_KERNELS must be auto|fast|ref, got {_choice!r}")

BACKEND = _impl.BACKEND

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight
bilinear2d_forward = _impl.bilinear2d_forward
bilinear2d_backward = _impl.bilinear2d_backward
trilinear3d_forward = _impl.trilinear3d_forward
trilinear3d_backward = _impl.trilinear3d_backward
scatter_add = _impl.scatter_add
