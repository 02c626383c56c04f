"""Finite-difference gradient checking for the registered operations.

`gradcheck` compares tape gradients against central differences in double
precision.  `OP_FACTORIES` supplies random, kink-free instances of every
registered differentiable op (relu away from 0, sampler coordinates away
from lattice lines, ...), so a full sweep never lands on a
non-differentiable point; factories resample rather than report kinks.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


def gradcheck(fn, inputs, eps=1e-6):
    """Max relative error between analytic and central-difference gradients.

    `fn(*inputs)` must return a scalar Tensor and be deterministic.  The
    error for each element is |a - n| / max(|a|, |n|, 1e-8); the max over
    all elements of all `requires_grad` inputs is returned.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"perturbation {eps} outside [1e-7, 1e-4]")
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("gradcheck requires double precision inputs")
    with Tape() as tape:
        loss = fn(*inputs)
    grads = tape.gradients(loss)
    max_err = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = tape.grad(grads, t).ravel()
        numeric = np.zeros_like(analytic)
        for i in range(t.size):
            orig = t.data.flat[i]
            t.data.flat[i] = orig + eps
            fp = fn(*inputs).item()
            t.data.flat[i] = orig - eps
            fm = fn(*inputs).item()
            t.data.flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        max_err = max(max_err, float(np.max(np.abs(analytic - numeric) / denom, initial=0.0)))
    return max_err


def _away_from_zero(rng, shape, margin=0.05):
    signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return signs * rng.uniform(margin, 1.0, shape)


def _safe_coords(rng, n, dims, oob_fraction=0.2):
    """Coordinates with fractional parts in [0.2, 0.8]; some out of bounds."""
    cols = []
    for d in dims:
        base = rng.integers(-2, d + 1, n).astype(np.float64)
        cols.append(base + rng.uniform(0.2, 0.8, n))
    coords = np.stack(cols, axis=1)
    keep_in = rng.random(n) > oob_fraction
    for j, d in enumerate(dims):
        inside = np.clip(coords[:, j], 0.3, d - 1.3)
        coords[:, j] = np.where(keep_in, inside, coords[:, j])
    return coords


def _probe_loss(op):
    """Reduce op output to a scalar through a fixed random linear probe."""

    def build(rng, inputs, **kwargs):
        with ad.no_grad():
            probe = Tensor(rng.standard_normal(op(*inputs, **kwargs).shape))

        def fn(*ts):
            return ad.reduce_sum(ad.mul(op(*ts, **kwargs), probe))

        return fn, inputs

    return build


def _make_add(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    return _probe_loss(ad.add)(rng, [a, b])


def _make_mul(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 1)), requires_grad=True)
    return _probe_loss(ad.mul)(rng, [a, b])


def _make_matmul(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    return _probe_loss(ad.matmul)(rng, [a, b])


def _make_conv2d(rng):
    x = Tensor(rng.standard_normal((2, 7, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    return _probe_loss(ad.conv2d)(rng, [x, w], stride=stride, padding=padding)


def _make_relu(rng):
    x = Tensor(_away_from_zero(rng, (4, 5)), requires_grad=True)
    return _probe_loss(ad.relu)(rng, [x])


def _make_sigmoid(rng):
    x = Tensor(2.0 * rng.standard_normal((4, 5)), requires_grad=True)
    return _probe_loss(ad.sigmoid)(rng, [x])


def _make_softmax(rng):
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    return _probe_loss(ad.softmax)(rng, [x], axis=-1)


def _make_exp(rng):
    x = Tensor(rng.uniform(-1.5, 1.5, (3, 4)), requires_grad=True)
    return _probe_loss(ad.exp)(rng, [x])


def _make_reciprocal(rng):
    x = Tensor(_away_from_zero(rng, (3, 4), margin=0.4), requires_grad=True)
    return _probe_loss(ad.reciprocal)(rng, [x])


def _make_absolute(rng):
    x = Tensor(_away_from_zero(rng, (4, 4)), requires_grad=True)
    return _probe_loss(ad.absolute)(rng, [x])


def _make_reshape(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    return _probe_loss(ad.reshape)(rng, [x], shape=(6, 4))


def _make_transpose(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    axes = tuple(rng.permutation(3))
    return _probe_loss(ad.transpose)(rng, [x], axes=axes)


def _make_slice(rng):
    x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    key = (slice(1, 3), slice(None, None, 2))
    return _probe_loss(ad.slice_)(rng, [x], key=key)


def _make_concat(rng):
    ts = [Tensor(rng.standard_normal((2, k)), requires_grad=True) for k in (2, 3, 1)]

    def op(*parts):
        return ad.concat(parts, axis=1)

    return _probe_loss(op)(rng, ts)


def _make_reduce_sum(rng):
    x = Tensor(rng.standard_normal((3, 4, 2)), requires_grad=True)
    axis = int(rng.integers(0, 3))
    return _probe_loss(ad.reduce_sum)(rng, [x], axis=axis)


def _make_reduce_mean(rng):
    x = Tensor(rng.standard_normal((3, 4, 2)), requires_grad=True)
    axis = int(rng.integers(0, 3))
    return _probe_loss(ad.reduce_mean)(rng, [x], axis=axis)


def _make_bilinear(rng):
    grid = Tensor(rng.standard_normal((2, 5, 6)), requires_grad=True)
    coords = Tensor(_safe_coords(rng, 7, (6, 5)), requires_grad=True)
    return _probe_loss(ad.bilinear_sample_2d)(rng, [grid, coords])


def _make_trilinear(rng):
    grid = Tensor(rng.standard_normal((2, 3, 4, 5)), requires_grad=True)
    coords = Tensor(_safe_coords(rng, 6, (5, 4, 3)), requires_grad=True)
    border = bool(rng.integers(0, 2))
    return _probe_loss(ad.trilinear_sample_3d)(rng, [grid, coords], border=border)


def _make_scatter_add(rng):
    values = Tensor(rng.standard_normal((8,)), requires_grad=True)
    idx = rng.integers(0, 12, 8)

    def op(v):
        return ad.scatter_add(v, idx, 12)

    return _probe_loss(op)(rng, [values])


OP_FACTORIES = {
    "add": _make_add,
    "mul": _make_mul,
    "matmul": _make_matmul,
    "conv2d": _make_conv2d,
    "relu": _make_relu,
    "sigmoid": _make_sigmoid,
    "softmax": _make_softmax,
    "exp": _make_exp,
    "reciprocal": _make_reciprocal,
    "absolute": _make_absolute,
    "reshape": _make_reshape,
    "transpose": _make_transpose,
    "slice": _make_slice,
    "concat": _make_concat,
    "reduce_sum": _make_reduce_sum,
    "reduce_mean": _make_reduce_mean,
    "bilinear_sample_2d": _make_bilinear,
    "trilinear_sample_3d": _make_trilinear,
    "scatter_add": _make_scatter_add,
}


def check_op(name, rng, instances=10, eps=1e-6):
    """Max relative error over `instances` random instances of one op."""
    factory = OP_FACTORIES[name]
    worst = 0.0
    for _ in range(instances):
        fn, inputs = factory(rng)
        worst = max(worst, gradcheck(fn, inputs, eps=eps))
    return worst


def check_all(seed=0, instances=10, eps=1e-6):
    """{op name: max relative error} over the whole registry."""
    rng = np.random.default_rng(seed)
    return {name: check_op(name, rng, instances=instances, eps=eps) for name in OP_FACTORIES}


def spot_gradcheck(fn, tensors, samples=5, eps=1e-5, seed=0):
    """Composition-scale check on a random coordinate subset.

    `fn()` must rebuild the computation from the current contents of
    `tensors` and return (scalar loss Tensor, Tape).  Only `samples`
    coordinates per tensor are perturbed, which keeps finite differences
    affordable through deep compositions; perturbed entries are restored
    before returning.
    """
    loss, tape = fn()
    grads = tape.gradients(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        if not t.requires_grad or t.size == 0:
            continue
        analytic = tape.grad(grads, t).ravel()
        idx = rng.choice(t.size, size=min(samples, t.size), replace=False)
        for i in idx:
            orig = t.data.flat[i]
            t.data.flat[i] = orig + eps
            fp = fn()[0].item()
            t.data.flat[i] = orig - eps
            fm = fn()[0].item()
            t.data.flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
