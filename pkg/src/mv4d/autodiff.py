"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every learnable stage of the pipeline is expressed through the operation
vocabulary defined here.  Design constraints:

* Results are recorded on the active :class:`Tape` whenever an input has
  ``requires_grad`` set; replaying the tape in reverse yields gradients.
* Operations hard-error on NaN/Inf outputs (``NonFiniteError``), so a
  divergent computation is caught at the op that produced it.
* float64 throughout the test suite; float32 supported for training.
  First-order gradients only -- there is no tape-of-tapes.

The hot kernels (conv2d, the two grid samplers, scatter_add) are delegated
to :mod:`mv4d._kernels`, which picks the compiled core or the numpy
fallback at import time.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

from . import _kernels as K

_ids = itertools.count()
_tls = threading.local()

_FLOAT_DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_finite_checks = True


def set_finite_checks(enabled):
    """Globally enable/disable the NaN/Inf output check (default on)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def _check_finite(op, arr):
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in result")


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def current_tape():
    """The innermost active tape for this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Context manager suppressing tape recording (e.g. SDF normals)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class Tensor:
    """Dense row-major real array plus autodiff bookkeeping.

    ``data`` is always a float32 or float64 ndarray.  ``node_id`` is a
    process-unique integer used to key gradients; it is stable for the
    lifetime of the tensor, so parameter tensors keep their id across
    training steps.
    """

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(value, like=None):
    """Wrap a scalar/ndarray as a constant Tensor (dtype taken from `like`)."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(value, dtype=dtype))


class Tape:
    """Ordered record of differentiable operations.

    Usable as a context manager; ops executed inside record themselves
    here whenever an input requires grad.  One tape per worker thread --
    tapes are never shared across threads.
    """

    def __init__(self):
        self._entries = []  # (out_id, input_ids, rg_flags, backward_fn, op)
        self._on_tape = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._entries)

    def _record(self, op, out, inputs, backward_fn):
        ids = tuple(t.node_id for t in inputs)
        flags = tuple(t.requires_grad for t in inputs)
        self._entries.append((out.node_id, ids, flags, backward_fn, op))
        self._on_tape.add(out.node_id)
        self._on_tape.update(ids)

    def gradients(self, loss):
        """Gradient map {node_id: ndarray} of a scalar loss.

        Reverse replay visits each recorded operation once; gradients of
        nodes the loss does not depend on are simply absent from the map
        (read them as zero via :meth:`grad`).
        """
        if isinstance(loss, Tensor):
            loss_id, loss_data = loss.node_id, loss.data
        else:
            raise TypeError("loss must be a Tensor")
        if loss_data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss_data.shape}")
        if loss_id not in self._on_tape:
            raise ValueError("loss node is not on this tape")
        grads = {loss_id: np.ones_like(loss_data)}
        for out_id, ids, flags, backward_fn, op in reversed(self._entries):
            g_out = grads.get(out_id)
            if g_out is None:
                continue
            g_inputs = backward_fn(g_out)
            for node_id, rg, g in zip(ids, flags, g_inputs):
                if not rg or g is None:
                    continue
                acc = grads.get(node_id)
                grads[node_id] = g if acc is None else acc + g
        return grads

    def grad(self, grads, tensor):
        """Gradient of `tensor` from a :meth:`gradients` map (zeros if unused)."""
        g = grads.get(tensor.node_id)
        return np.zeros_like(tensor.data) if g is None else g


def backward(tape, loss):
    """Reverse-replay `tape` from the scalar `loss`; see Tape.gradients."""
    return tape.gradients(loss)


def _result(op, out_data, inputs, backward_fn):
    _check_finite(op, out_data)
    tape = current_tape()
    rg = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rg)
    if rg:
        tape._record(op, out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------


def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", out, (a, b), bwd)


def sub(a, b):
    return add(a, mul(b, -1.0))


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result("mul", out, (a, b), bwd)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.ndim}-D and {b.data.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _result("matmul", out, (a, b), bwd)


def relu(x):
    out = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient at 0 is 0

    def bwd(g):
        return (g * mask,)

    return _result("relu", out, (x,), bwd)


def sigmoid(x):
    out = _stable_sigmoid(x.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _result("sigmoid", out, (x,), bwd)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=-1):
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.data.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _result("softmax", out, (x,), bwd)


def exp(x):
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _result("exp", out, (x,), bwd)


def reciprocal(x):
    out = 1.0 / x.data

    def bwd(g):
        return (-g * out * out,)

    return _result("reciprocal", out, (x,), bwd)


def absolute(x):
    out = np.abs(x.data)
    sign = np.sign(x.data)  # subgradient at 0 is 0

    def bwd(g):
        return (g * sign,)

    return _result("absolute", out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape):
    shape = tuple(shape)
    out = x.data.reshape(shape)
    old = x.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _result("reshape", out, (x,), bwd)


def transpose(x, axes=None):
    out = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _result("transpose", out, (x,), bwd)


def slice_(x, key):
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    old_shape, old_dtype = x.data.shape, x.data.dtype

    def bwd(g):
        gx = np.zeros(old_shape, dtype=old_dtype)
        gx[key] = g.reshape(gx[key].shape)
        return (gx,)

    return _result("slice", out, (x,), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[offsets[i] : offsets[i + 1]], 0, axis) for i in range(len(sizes))
        )

    return _result("concat", out, tuple(tensors), bwd)


def reduce_sum(x, axis=None, keepdims=False):
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.data.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("reduce_sum", out, (x,), bwd)


def reduce_mean(x, axis=None, keepdims=False):
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    shape = x.data.shape
    scale = x.data.size / max(out.size, 1)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / scale,)

    return _result("reduce_mean", out, (x,), bwd)


# ---------------------------------------------------------------------------
# structured kernels
# ---------------------------------------------------------------------------


def conv2d(x, w, stride=1, padding=0):
    """2-D convolution of a (Ci,H,W) image with a (Co,Ci,kh,kw) kernel."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects (Ci,H,W) and (Co,Ci,kh,kw), got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[0]}, kernel {w.shape[1]}")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    out = K.conv2d_forward(xd, wd, stride, padding)
    h, w_in = x.shape[1], x.shape[2]
    kh, kw = w.shape[2], w.shape[3]

    def bwd(g):
        g = np.ascontiguousarray(g)
        return (
            K.conv2d_grad_input(g, wd, stride, padding, h, w_in),
            K.conv2d_grad_weight(g, xd, stride, padding, kh, kw),
        )

    return _result("conv2d", out, (x, w), bwd)


def bilinear_sample_2d(grid, coords):
    """Sample a (C,H,W) grid at (N,2) pixel coordinates (x,y); zeros outside.

    Differentiable in both the grid values and the coordinates.
    """
    if grid.data.ndim != 3 or coords.data.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"bilinear_sample_2d expects (C,H,W) and (N,2), got {grid.shape} and {coords.shape}")
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("bilinear_sample_2d: non-finite sample coordinates")
    gd = np.ascontiguousarray(grid.data)
    cd = np.ascontiguousarray(coords.data.astype(gd.dtype, copy=False))
    out = K.bilinear2d_forward(gd, cd)

    def bwd(g):
        ggrid, gcoords = K.bilinear2d_backward(gd, cd, np.ascontiguousarray(g))
        return ggrid, gcoords.astype(coords.dtype, copy=False)

    return _result("bilinear_sample_2d", out, (grid, coords), bwd)


def trilinear_sample_3d(grid, coords, border=False):
    """Sample a (C,D,H,W) grid at (N,3) coordinates (x,y,z) -> (W,H,D) axes.

    ``border=False`` fades to zero outside the grid (attention-style);
    ``border=True`` clamps coordinates to the outermost cell centers.
    """
    if grid.data.ndim != 4 or coords.data.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"trilinear_sample_3d expects (C,D,H,W) and (N,3), got {grid.shape} and {coords.shape}")
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("trilinear_sample_3d: non-finite sample coordinates")
    gd = np.ascontiguousarray(grid.data)
    cd = np.ascontiguousarray(coords.data.astype(gd.dtype, copy=False))
    out = K.trilinear3d_forward(gd, cd, border)

    def bwd(g):
        ggrid, gcoords = K.trilinear3d_backward(gd, cd, np.ascontiguousarray(g), border)
        return ggrid, gcoords.astype(coords.dtype, copy=False)

    return _result("trilinear_sample_3d", out, (grid, coords), bwd)


def scatter_add(values, indices, size):
    """out[indices[k]] += values[k] into a fresh 1-D tensor of length `size`.

    `indices` is a constant integer array of the same shape as `values`.
    """
    idx = np.ascontiguousarray(np.asarray(indices, dtype=np.int64).ravel())
    if idx.shape[0] != values.data.size:
        raise ValueError(f"scatter_add: {values.data.size} values vs {idx.shape[0]} indices")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ValueError("scatter_add: index out of range")
    vd = np.ascontiguousarray(values.data.ravel())
    out = K.scatter_add(vd, idx, size)
    shape = values.data.shape

    def bwd(g):
        return (g[idx].reshape(shape),)

    return _result("scatter_add", out, (values,), bwd)


# ---------------------------------------------------------------------------
# composite helpers (no new primitives)
# ---------------------------------------------------------------------------


def clamp_min(x, floor_value):
    """max(x, floor_value) composed from relu."""
    return add(relu(sub(x, floor_value)), floor_value)


def linear(x, w, b=None):
    """x @ w (+ b), x: (N,Ci), w: (Ci,Co), b: (Co,)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out
