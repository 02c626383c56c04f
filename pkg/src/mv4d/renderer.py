"""Differentiable SDF volume rendering from a voxel grid.

A sampled point gets a feature by trilinear interpolation, an SDF value
and geometry feature from one small perceptron, and a color from a
second one conditioned on view direction and the SDF normal.  Opacity
comes from the sigmoid-ratio of consecutive SDF values with a learnable
sharpness a = exp(a_hat) > 0; colors and depths accumulate under
front-to-back transmittance.  Supervision is L1 on color and depth at
selected pixels.

The field abstraction lets tests swap the learned grid for an analytic
SDF with known first-hit depths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import EgoPose, generate_ray, sample_along_ray
from .scene import scene_sdf_with_albedo

SIGMA_FLOOR = 1e-12


@dataclass
class RenderHeads:
    """SDF and color perceptrons plus the opacity sharpness."""

    sdf_w1: ad.Tensor
    sdf_b1: ad.Tensor
    sdf_w2: ad.Tensor
    sdf_b2: ad.Tensor
    rgb_w1: ad.Tensor
    rgb_b1: ad.Tensor
    rgb_w2: ad.Tensor
    rgb_b2: ad.Tensor
    a_hat: ad.Tensor

    def sharpness(self):
        """a = exp(a_hat), strictly positive by construction."""
        return ad.exp(self.a_hat)

    def parameters(self):
        return {
            "heads.sdf.w1": self.sdf_w1,
            "heads.sdf.b1": self.sdf_b1,
            "heads.sdf.w2": self.sdf_w2,
            "heads.sdf.b2": self.sdf_b2,
            "heads.rgb.w1": self.rgb_w1,
            "heads.rgb.b1": self.rgb_b1,
            "heads.rgb.w2": self.rgb_w2,
            "heads.rgb.b2": self.rgb_b2,
            "heads.a_hat": self.a_hat,
        }


def init_heads(rng, feat_channels, hidden=32, geo_channels=8, a_init=8.0, dtype=np.float64):
    def lin(ci, co):
        std = 1.0 / np.sqrt(ci)
        return (
            ad.Tensor(rng.normal(0.0, std, (ci, co)).astype(dtype), requires_grad=True),
            ad.Tensor(np.zeros(co, dtype=dtype), requires_grad=True),
        )

    sdf_in = feat_channels + 3
    rgb_in = feat_channels + 3 + 3 + 3 + geo_channels
    sdf_w1, sdf_b1 = lin(sdf_in, hidden)
    sdf_w2, sdf_b2 = lin(hidden, 1 + geo_channels)
    rgb_w1, rgb_b1 = lin(rgb_in, hidden)
    rgb_w2, rgb_b2 = lin(hidden, 3)
    return RenderHeads(
        sdf_w1=sdf_w1,
        sdf_b1=sdf_b1,
        sdf_w2=sdf_w2,
        sdf_b2=sdf_b2,
        rgb_w1=rgb_w1,
        rgb_b1=rgb_b1,
        rgb_w2=rgb_w2,
        rgb_b2=rgb_b2,
        a_hat=ad.Tensor(np.asarray(np.log(a_init), dtype=dtype), requires_grad=True),
    )


def interpolate_feature(grid, points):
    """Trilinear feature lookup at (N,3) metric ego positions.

    Clamps to the outermost cell centers inside the extent (a constant
    grid reads back constant everywhere in-extent) and hard-zeroes
    features for points outside the metric extent.
    """
    spec = grid.spec
    p = np.asarray(points, dtype=np.float64)
    coords = np.stack(
        [
            (p[:, 0] - spec.x_min) / spec.dx - 0.5,
            (p[:, 1] - spec.y_min) / spec.dy - 0.5,
            (p[:, 2] - spec.z_min) / spec.dz - 0.5,
        ],
        axis=1,
    )
    inside = (
        (p[:, 0] >= spec.x_min)
        & (p[:, 0] < spec.x_max)
        & (p[:, 1] >= spec.y_min)
        & (p[:, 1] < spec.y_max)
        & (p[:, 2] >= spec.z_min)
        & (p[:, 2] < spec.z_max)
    )
    feats = ad.trilinear_sample_3d(
        grid.features, ad.as_tensor(coords, like=grid.features), border=True
    )
    gate = ad.as_tensor(inside[:, None].astype(grid.features.dtype), like=feats)
    return ad.mul(feats, gate)


def sdf_head(features, points, heads):
    """(N,C) features + (N,3) positions -> SDF values (N,), geometry (N,G)."""
    x = ad.concat([features, ad.as_tensor(np.asarray(points, dtype=np.float64), like=features)], axis=1)
    h = ad.relu(ad.linear(x, heads.sdf_w1, heads.sdf_b1))
    out = ad.linear(h, heads.sdf_w2, heads.sdf_b2)
    s = ad.slice_(out, (slice(None), 0))
    g = ad.slice_(out, (slice(None), slice(1, None)))
    return s, g


def rgb_head(features, points, directions, normals, geo, heads):
    """Pointwise color in [0,1]^3 conditioned on direction and normal."""
    consts = [np.asarray(a, dtype=np.float64) for a in (points, directions, normals)]
    x = ad.concat(
        [features] + [ad.as_tensor(c, like=features) for c in consts] + [geo],
        axis=1,
    )
    h = ad.relu(ad.linear(x, heads.rgb_w1, heads.rgb_b1))
    return ad.sigmoid(ad.linear(h, heads.rgb_w2, heads.rgb_b2))


def learned_sdf(grid, heads):
    """Plain-ndarray view of the composed SDF field s(p), for normals."""

    def fn(points):
        with ad.no_grad():
            feats = interpolate_feature(grid, points)
            s, _ = sdf_head(feats, points, heads)
        return s.data

    return fn


def normal(sdf_fn, points, eps):
    """Unit normals by central differences of a scalar field.

    Degenerate gradients (norm < 1e-8) fall back to the zero vector.
    Normals are constants to the tape by construction.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    p = np.asarray(points, dtype=np.float64)
    grad = np.zeros_like(p)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = eps
        grad[:, axis] = (sdf_fn(p + step) - sdf_fn(p - step)) / (2.0 * eps)
    norms = np.linalg.norm(grad, axis=1, keepdims=True)
    return np.where(norms > 1e-8, grad / np.maximum(norms, 1e-8), 0.0)


class LearnedField:
    """Voxel grid + heads exposed as per-point (sdf, color)."""

    def __init__(self, grid, heads, eps_normal):
        self.grid = grid
        self.heads = heads
        self.eps_normal = eps_normal
        self._sdf_fn = learned_sdf(grid, heads)

    def __call__(self, points, directions):
        feats = interpolate_feature(self.grid, points)
        s, g = sdf_head(feats, points, self.heads)
        n = normal(self._sdf_fn, points, self.eps_normal)
        c = rgb_head(feats, points, directions, n, g, self.heads)
        return s, c


class AnalyticSdfField:
    """Exact scene SDF with flat albedo, for rendering-oracle tests."""

    def __init__(self, scene, time=0.0):
        self.scene = scene
        self.time = time

    def __call__(self, points, directions):
        s, albedo = scene_sdf_with_albedo(self.scene, np.asarray(points), self.time)
        return ad.Tensor(s), ad.Tensor(albedo)


def opacity(s, s_next, a):
    """alpha = max((sigma(s_j) - sigma(s_{j+1})) / sigma(s_j), 0).

    sigma is the logistic with slope a; the denominator is floored to
    keep deep-negative SDF runs finite.
    """
    sig = ad.sigmoid(ad.mul(s, a))
    sig_next = ad.sigmoid(ad.mul(s_next, a))
    ratio = ad.mul(ad.sub(sig, sig_next), ad.reciprocal(ad.clamp_min(sig, SIGMA_FLOOR)))
    return ad.relu(ratio)


def transmittance(alpha):
    """T_j = prod_{k<j} (1 - alpha_k) along axis 1 of an (R,K) tensor."""
    r, k = alpha.shape
    one_minus = ad.sub(1.0, alpha)
    cols = [ad.as_tensor(np.ones((r, 1)), like=alpha)]
    running = cols[0]
    for j in range(1, k):
        running = ad.mul(running, ad.slice_(one_minus, (slice(None), slice(j - 1, j))))
        cols.append(running)
    return ad.concat(cols, axis=1)


def accumulate(alpha, colors, t):
    """Front-to-back compositing -> (color (R,3), depth (R,), weights (R,K))."""
    trans = transmittance(alpha)
    weights = ad.mul(trans, alpha)
    r, k = alpha.shape
    color = ad.reduce_sum(ad.mul(ad.reshape(weights, (r, k, 1)), colors), axis=1)
    depth = ad.reduce_sum(ad.mul(weights, ad.as_tensor(np.asarray(t), like=weights)), axis=1)
    return color, depth, weights


def render_rays(field, origins, dirs, t, a):
    """Render R rays with per-ray sample depths t (R,K).

    Returns (color (R,3), depth (R,), weights (R,K)) tensors.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    r, k = t.shape
    positions = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    flat_p = positions.reshape(r * k, 3)
    flat_d = np.repeat(dirs, k, axis=0)
    s, c = field(flat_p, flat_d)
    s = ad.reshape(s, (r, k))
    colors = ad.reshape(c, (r, k, 3))
    # terminal opacity: a virtual (K+1)-th SDF of zero closes the last interval
    s_next = ad.concat(
        [ad.slice_(s, (slice(None), slice(1, None))), ad.as_tensor(np.zeros((r, 1)), like=s)],
        axis=1,
    )
    alpha = opacity(s, s_next, a)
    return accumulate(alpha, colors, t)


def supervision_rays(camera, sup, count_samples, near, far, jitter=False, rng=None):
    """Ego-frame rays through supervision pixel centers, plus sample depths."""
    origins = np.zeros((len(sup), 3))
    dirs = np.zeros((len(sup), 3))
    t = np.zeros((len(sup), count_samples))
    identity = EgoPose.identity()
    for i, (u, v) in enumerate(sup.uv):
        ray = generate_ray(camera, (float(u) + 0.5, float(v) + 0.5), identity)
        ray, _ = sample_along_ray(ray, near, far, count_samples, jitter=jitter, rng=rng)
        origins[i] = ray.origin
        dirs[i] = ray.direction
        t[i] = ray.t
    return origins, dirs, t


def render_loss(
    grid,
    heads,
    supervision,
    cameras,
    samples_per_ray,
    near,
    far,
    lambda_rgb,
    lambda_depth,
    eps_normal,
    jitter=False,
    rng=None,
):
    """L1 color + depth loss over all supervision pixels of one frame.

    Rays are cast in the grid's own ego frame.  Returns (scalar loss
    tensor, diagnostics dict).
    """
    total = sum(len(s) for s in supervision)
    if total == 0:
        raise ValueError("render_loss needs at least one supervision pixel")
    field = LearnedField(grid, heads, eps_normal)
    a = heads.sharpness()
    rgb_term = None
    depth_term = None
    weight_sums = []
    for camera, sup in zip(cameras, supervision):
        if len(sup) == 0:
            continue
        origins, dirs, t = supervision_rays(camera, sup, samples_per_ray, near, far, jitter, rng)
        color, depth, weights = render_rays(field, origins, dirs, t, a)
        c_err = ad.reduce_sum(ad.absolute(ad.sub(color, ad.as_tensor(sup.colors, like=color))))
        d_err = ad.reduce_sum(ad.absolute(ad.sub(depth, ad.as_tensor(sup.depths, like=depth))))
        rgb_term = c_err if rgb_term is None else ad.add(rgb_term, c_err)
        depth_term = d_err if depth_term is None else ad.add(depth_term, d_err)
        weight_sums.append(weights.data.sum(axis=1))
    rgb_term = ad.mul(rgb_term, lambda_rgb / total)
    depth_term = ad.mul(depth_term, lambda_depth / total)
    loss = ad.add(rgb_term, depth_term)
    ws = np.concatenate(weight_sums) if weight_sums else np.zeros(0)
    diagnostics = {
        "rgb_term": float(rgb_term.data),
        "depth_term": float(depth_term.data),
        "weight_sum_mean": float(ws.mean()) if ws.size else 0.0,
        "weight_sum_min": float(ws.min()) if ws.size else 0.0,
        "weight_sum_max": float(ws.max()) if ws.size else 0.0,
    }
    return loss, diagnostics


def render_image(field, camera, samples_per_ray, near, far, a, chunk=512):
    """Dense predicted color/depth maps (inspection only, no gradients)."""
    h, w = camera.height, camera.width
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dirs_cam = np.stack(
        [(us - camera.cx) / camera.fx, (vs - camera.cy) / camera.fy, np.ones_like(us)],
        axis=-1,
    ).reshape(-1, 3)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
    ego_from_cam = camera.cam_from_ego.inverse()
    dirs = dirs_cam @ ego_from_cam.rotation.T
    origin = ego_from_cam.translation
    edges = np.linspace(near, far, samples_per_ray + 1)
    t_row = 0.5 * (edges[:-1] + edges[1:])
    color = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    with ad.no_grad():
        for start in range(0, h * w, chunk):
            stop = min(start + chunk, h * w)
            d = dirs[start:stop]
            t = np.broadcast_to(t_row, (stop - start, samples_per_ray))
            o = np.broadcast_to(origin, d.shape)
            c, dep, _ = render_rays(field, o, d, t, a)
            color[start:stop] = c.data
            depth[start:stop] = dep.data
    return color.reshape(h, w, 3), depth.reshape(h, w)
