"""Voxel encoder: masked convolutional backbone plus lift-splat.

The backbone re-zeroes features after every stage wherever the
downsampled mask says a cell's pixel footprint was fully hidden, so
hidden pixels can never leak into visible features.  Masked feature
cells are then filled with a learned token, and each view's dense
feature map is lifted through a softmax depth distribution and
scatter-added into a metric voxel grid in the frame's own ego
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .masking import downsample_mask


@dataclass(frozen=True)
class VoxelSpec:
    """Metric extent and resolution of the ego-centric voxel lattice."""

    nx: int = 32
    ny: int = 32
    nz: int = 4
    x_min: float = -8.0
    x_max: float = 8.0
    y_min: float = -8.0
    y_max: float = 8.0
    z_min: float = -1.0
    z_max: float = 3.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.nz < 1:
            raise ValueError("voxel resolution must be positive")
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.z_min < self.z_max):
            raise ValueError("voxel extent must have positive volume")

    @property
    def dx(self):
        return (self.x_max - self.x_min) / self.nx

    @property
    def dy(self):
        return (self.y_max - self.y_min) / self.ny

    @property
    def dz(self):
        return (self.z_max - self.z_min) / self.nz

    @property
    def n_cells(self):
        return self.nx * self.ny * self.nz

    def cell_indices(self, points):
        """(N,3) ego points -> (flat cell index, in-extent flag)."""
        p = np.asarray(points)
        ix = np.floor((p[:, 0] - self.x_min) / self.dx).astype(np.int64)
        iy = np.floor((p[:, 1] - self.y_min) / self.dy).astype(np.int64)
        iz = np.floor((p[:, 2] - self.z_min) / self.dz).astype(np.int64)
        inside = (
            (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny) & (iz >= 0) & (iz < self.nz)
        )
        flat = (iz * self.ny + iy) * self.nx + ix
        return np.where(inside, flat, 0), inside


@dataclass
class VoxelGrid:
    """Features (C, Z, Y, X) over a VoxelSpec, in one frame's ego frame."""

    features: ad.Tensor
    spec: VoxelSpec
    timestamp: int

    @property
    def channels(self):
        return self.features.shape[0]


@dataclass
class BackboneParams:
    """Convolution stack plus mask token and the two lift heads."""

    conv_weights: list
    conv_biases: list
    strides: tuple
    mask_token: ad.Tensor
    depth_weight: ad.Tensor
    depth_bias: ad.Tensor
    context_weight: ad.Tensor
    context_bias: ad.Tensor

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            out[f"backbone.conv{i}.weight"] = w
            out[f"backbone.conv{i}.bias"] = b
        out["backbone.mask_token"] = self.mask_token
        out["backbone.depth.weight"] = self.depth_weight
        out["backbone.depth.bias"] = self.depth_bias
        out["backbone.context.weight"] = self.context_weight
        out["backbone.context.bias"] = self.context_bias
        return out

    @property
    def total_stride(self):
        return int(np.prod(self.strides))

    @property
    def out_channels(self):
        return self.context_weight.shape[1]


def init_backbone(
    rng,
    in_channels=3,
    stage_channels=(16, 32, 32, 32),
    strides=(2, 2, 2, 1),
    depth_bins=16,
    voxel_channels=16,
    dtype=np.float64,
):
    if len(stage_channels) != len(strides):
        raise ValueError("one stride per stage")
    weights, biases = [], []
    c_in = in_channels
    for c_out in stage_channels:
        std = np.sqrt(2.0 / (c_in * 9))
        weights.append(ad.Tensor(rng.normal(0.0, std, (c_out, c_in, 3, 3)).astype(dtype), requires_grad=True))
        biases.append(ad.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))
        c_in = c_out
    c_img = stage_channels[-1]
    std = 1.0 / np.sqrt(c_img)
    return BackboneParams(
        conv_weights=weights,
        conv_biases=biases,
        strides=tuple(strides),
        mask_token=ad.Tensor(rng.normal(0.0, 0.01, c_img).astype(dtype), requires_grad=True),
        depth_weight=ad.Tensor(rng.normal(0.0, std, (c_img, depth_bins)).astype(dtype), requires_grad=True),
        depth_bias=ad.Tensor(np.zeros(depth_bins, dtype=dtype), requires_grad=True),
        context_weight=ad.Tensor(rng.normal(0.0, std, (c_img, voxel_channels)).astype(dtype), requires_grad=True),
        context_bias=ad.Tensor(np.zeros(voxel_channels, dtype=dtype), requires_grad=True),
    )


def masked_backbone(image, visible, params):
    """(3,H,W) masked image + (H,W) visibility -> (C_img,h,w) features
    and the visibility grid at feature resolution."""
    x = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
    vis = np.asarray(visible, dtype=bool)
    if vis.shape != x.shape[1:]:
        raise ValueError(f"visibility {vis.shape} vs image {x.shape[1:]}")
    for w, b, stride in zip(params.conv_weights, params.conv_biases, params.strides):
        x = ad.conv2d(x, w, stride=stride, padding=1)
        x = ad.add(x, ad.reshape(b, (b.shape[0], 1, 1)))
        x = ad.relu(x)
        vis = ~downsample_mask(~vis, stride)
        # bias would leak nonzero values into hidden cells; force them back to zero
        x = ad.mul(x, ad.as_tensor(vis.astype(x.dtype), like=x))
    return x, vis


def densify(features, visible, mask_token):
    """Replace hidden feature cells with the learned token."""
    vis = ad.as_tensor(np.asarray(visible, dtype=features.dtype), like=features)
    token = ad.reshape(mask_token, (mask_token.shape[0], 1, 1))
    return ad.add(ad.mul(features, vis), ad.mul(token, ad.sub(1.0, vis)))


def depth_bin_centers(depth_bins, near, far):
    edges = np.linspace(near, far, depth_bins + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def lift_points_ego(camera, feature_shape, stride, bin_centers):
    """Ego-frame positions of every (feature pixel, depth bin) sample.

    Feature pixel (i, j) covers image pixels around ((i+0.5)*stride,
    (j+0.5)*stride); depths are pinhole z-depths.  Returns (h*w*D, 3).
    """
    h, w = feature_shape
    us = (np.arange(w) + 0.5) * stride
    vs = (np.arange(h) + 0.5) * stride
    gu, gv = np.meshgrid(us, vs)
    xn = (gu.ravel() - camera.cx) / camera.fx
    yn = (gv.ravel() - camera.cy) / camera.fy
    d = np.asarray(bin_centers)
    cam_pts = np.stack(
        [
            np.multiply.outer(xn, d),
            np.multiply.outer(yn, d),
            np.broadcast_to(d, (h * w, d.size)),
        ],
        axis=-1,
    ).reshape(-1, 3)
    return camera.cam_from_ego.inverse().apply(cam_pts)


def lift_splat(features, camera, params, spec, bin_centers, timestamp=0):
    """Dense (C_img,h,w) features -> VoxelGrid via depth-distribution lift.

    Per feature pixel the depth softmax times the context feature gives D
    weighted points; each is scatter-added into its containing voxel.
    Out-of-extent points go to a scratch slot that is sliced away.
    """
    c_img, h, w = features.shape
    n_pix = h * w
    flat = ad.transpose(ad.reshape(features, (c_img, n_pix)), (1, 0))
    depth_logits = ad.linear(flat, params.depth_weight, params.depth_bias)
    depth_dist = ad.softmax(depth_logits, axis=1)
    context = ad.linear(flat, params.context_weight, params.context_bias)
    n_bins = depth_dist.shape[1]
    c_out = context.shape[1]
    outer = ad.mul(
        ad.reshape(depth_dist, (n_pix, n_bins, 1)),
        ad.reshape(context, (n_pix, 1, c_out)),
    )
    values = ad.reshape(outer, (n_pix * n_bins, c_out))
    points = lift_points_ego(camera, (h, w), params.total_stride, bin_centers)
    cell, inside = spec.cell_indices(points)
    # channel-major flat target; one trailing scratch cell absorbs dropped points
    target = np.where(inside[:, None], np.arange(c_out)[None, :] * spec.n_cells + cell[:, None], c_out * spec.n_cells)
    pooled = ad.scatter_add(values, target, c_out * spec.n_cells + 1)
    grid = ad.reshape(ad.slice_(pooled, slice(0, c_out * spec.n_cells)), (c_out, spec.nz, spec.ny, spec.nx))
    return VoxelGrid(features=grid, spec=spec, timestamp=timestamp)


def encode_frame(images, visibilities, cameras, params, spec, bin_centers, timestamp):
    """All views of one timestamp -> a single VoxelGrid (summed splats)."""
    grid = None
    for image, visible, camera in zip(images, visibilities, cameras):
        feats, vis = masked_backbone(image, visible, params)
        dense = densify(feats, vis, params.mask_token)
        contribution = lift_splat(dense, camera, params, spec, bin_centers, timestamp)
        grid = contribution if grid is None else VoxelGrid(
            features=ad.add(grid.features, contribution.features), spec=spec, timestamp=timestamp
        )
    return grid


def encode_clip(clip, masks, params, spec, bin_centers):
    """Masked clip -> one VoxelGrid per timestamp, each in its own ego frame."""
    from .masking import apply_mask

    grids = []
    for t in range(clip.num_frames):
        images, visibilities = [], []
        for v in range(clip.num_views):
            masked, visible = apply_mask(clip.images[t, v].astype(np.float64), masks[(t, v)])
            images.append(ad.Tensor(np.moveaxis(masked, 2, 0)))
            visibilities.append(visible.astype(bool))
        grids.append(encode_frame(images, visibilities, clip.cameras, params, spec, bin_centers, t))
    return grids
