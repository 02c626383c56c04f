"""Temporal decoder: drop one frame's voxel grid, reconstruct it from the rest.

Voxel grids are folded to BEV (bird's-eye view) maps by moving the
vertical axis into channels, aligned across frames through ego motion,
and queried with deformable attention: a short-term branch over the
adjacent frames at full width and a long-term branch over all remaining
frames at half width, fused by a small perceptron.  Alternative
strategies (none, warp-cat, single branches) share the same entry point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import VoxelGrid
from .geometry import bev_cell_centers, warp_reference_points

STRATEGIES = ("none", "warp-cat", "short", "long", "both")


@dataclass
class BevGrid:
    """Features (C', H_v, W_v) with C' = C * Z, in one frame's ego frame."""

    features: ad.Tensor
    spec: object
    timestamp: int

    @property
    def channels(self):
        return self.features.shape[0]


def height_to_channel(grid):
    """VoxelGrid (C,Z,Y,X) -> BevGrid (C*Z,Y,X); B[c*Z+z,y,x] = V[c,z,y,x]."""
    c, z, y, x = grid.features.shape
    return BevGrid(
        features=ad.reshape(grid.features, (c * z, y, x)),
        spec=grid.spec,
        timestamp=grid.timestamp,
    )


def channel_to_height(bev, z_cells):
    """Exact inverse of height_to_channel."""
    cp, y, x = bev.features.shape
    if cp % z_cells:
        raise ValueError(f"channel count {cp} not divisible by Z={z_cells}")
    return VoxelGrid(
        features=ad.reshape(bev.features, (cp // z_cells, z_cells, y, x)),
        spec=bev.spec,
        timestamp=bev.timestamp,
    )


@dataclass
class QueryGrid:
    """Learnable BEV query lattice for one branch."""

    features: ad.Tensor
    branch: str


@dataclass
class DeformAttnParams:
    """Projections for one deformable-attention branch.

    Offset and weight projections are laid out per parameter slot so a
    boundary drop (only one adjacent frame) uses the matching slice and
    renormalizes the softmax over the points that exist.
    """

    value_weight: ad.Tensor
    value_bias: ad.Tensor
    offset_weight: ad.Tensor
    offset_bias: ad.Tensor
    attn_weight: ad.Tensor
    attn_bias: ad.Tensor
    output_weight: ad.Tensor
    output_bias: ad.Tensor
    n_heads: int
    n_points: int
    n_slots: int

    def parameters(self, prefix):
        return {
            f"{prefix}.value.weight": self.value_weight,
            f"{prefix}.value.bias": self.value_bias,
            f"{prefix}.offset.weight": self.offset_weight,
            f"{prefix}.offset.bias": self.offset_bias,
            f"{prefix}.attn.weight": self.attn_weight,
            f"{prefix}.attn.bias": self.attn_bias,
            f"{prefix}.output.weight": self.output_weight,
            f"{prefix}.output.bias": self.output_bias,
        }


def init_deform_attn(rng, src_channels, query_channels, n_heads, n_points, n_slots, dtype=np.float64):
    if query_channels % n_heads:
        raise ValueError(f"query width {query_channels} not divisible by {n_heads} heads")
    n_out = n_heads * n_slots * n_points

    def lin(ci, co, std):
        return (
            ad.Tensor(rng.normal(0.0, std, (ci, co)).astype(dtype), requires_grad=True),
            ad.Tensor(np.zeros(co, dtype=dtype), requires_grad=True),
        )

    value_w, value_b = lin(src_channels, query_channels, 1.0 / np.sqrt(src_channels))
    # zero offset/attention projections start at the reference points with
    # uniform weights; the bias spreads the initial sampling locations
    offset_w = ad.Tensor(np.zeros((query_channels, n_out * 2), dtype=dtype), requires_grad=True)
    offset_b = ad.Tensor(rng.uniform(-0.5, 0.5, n_out * 2).astype(dtype), requires_grad=True)
    attn_w = ad.Tensor(np.zeros((query_channels, n_out), dtype=dtype), requires_grad=True)
    attn_b = ad.Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
    output_w, output_b = lin(query_channels, query_channels, 1.0 / np.sqrt(query_channels))
    return DeformAttnParams(
        value_weight=value_w,
        value_bias=value_b,
        offset_weight=offset_w,
        offset_bias=offset_b,
        attn_weight=attn_w,
        attn_bias=attn_b,
        output_weight=output_w,
        output_bias=output_b,
        n_heads=n_heads,
        n_points=n_points,
        n_slots=n_slots,
    )


def metric_to_grid(spec, points_xy):
    """Metric BEV (x,y) -> fractional (column, row) of the feature lattice.

    Cell centers land on integer coordinates, matching the bilinear
    sampler's convention.
    """
    p = np.asarray(points_xy, dtype=np.float64)
    col = (p[..., 0] - spec.x_min) / spec.dx - 0.5
    row = (p[..., 1] - spec.y_min) / spec.dy - 0.5
    return np.stack([col, row], axis=-1)


def reference_grid(spec):
    """(N_q, 2) metric cell centers of the BEV lattice, row-major."""
    return bev_cell_centers(spec.x_min, spec.x_max, spec.y_min, spec.y_max, spec.nx, spec.ny).reshape(-1, 2)


def deform_attn(query, ref_points, sources, params, slots=None):
    """Deformable attention over BEV sources.

    ref_points: list of (N_q, 2) fractional grid coordinates, one per
    source (already warped into that source's frame).  slots names the
    parameter slot of each source; softmax weights are normalized over
    the sources actually present.  Returns a BevGrid at the query width.
    """
    if not sources:
        raise ValueError("deform_attn needs at least one source")
    if slots is None:
        slots = list(range(len(sources)))
    if len(ref_points) != len(sources) or len(slots) != len(sources):
        raise ValueError("sources, ref_points and slots must align")
    cq, gh, gw = query.features.shape
    n_q = gh * gw
    nh, kd = params.n_heads, params.n_points
    ch = cq // nh
    q_flat = ad.transpose(ad.reshape(query.features, (cq, n_q)), (1, 0))

    offsets = ad.linear(q_flat, params.offset_weight, params.offset_bias)
    offsets = ad.reshape(offsets, (n_q, nh, params.n_slots, kd, 2))
    logits = ad.reshape(
        ad.linear(q_flat, params.attn_weight, params.attn_bias),
        (n_q, nh, params.n_slots, kd),
    )
    present = ad.concat([ad.slice_(logits, (slice(None), slice(None), s)) for s in slots], axis=2)
    weights = ad.softmax(ad.reshape(present, (n_q, nh, len(sources) * kd)), axis=2)
    weights = ad.reshape(weights, (n_q, nh, len(sources), kd))

    head_outputs = []
    for h in range(nh):
        acc = None
        for i, (src, base, slot) in enumerate(zip(sources, ref_points, slots)):
            n_src = src.features.shape[1] * src.features.shape[2]
            v_flat = ad.linear(
                ad.transpose(ad.reshape(src.features, (src.channels, n_src)), (1, 0)),
                params.value_weight,
                params.value_bias,
            )
            v_grid = ad.reshape(ad.transpose(v_flat, (1, 0)), (cq, src.features.shape[1], src.features.shape[2]))
            v_head = ad.slice_(v_grid, slice(h * ch, (h + 1) * ch))
            offs = ad.slice_(offsets, (slice(None), h, slot))
            coords = ad.add(offs, ad.as_tensor(base[:, None, :], like=offs))
            sampled = ad.bilinear_sample_2d(v_head, ad.reshape(coords, (n_q * kd, 2)))
            sampled = ad.reshape(sampled, (n_q, kd, ch))
            w = ad.reshape(ad.slice_(weights, (slice(None), h, i)), (n_q, kd, 1))
            term = ad.reduce_sum(ad.mul(sampled, w), axis=1)
            acc = term if acc is None else ad.add(acc, term)
        head_outputs.append(acc)
    combined = ad.concat(head_outputs, axis=1)
    out = ad.linear(combined, params.output_weight, params.output_bias)
    out_grid = ad.reshape(ad.transpose(out, (1, 0)), (cq, gh, gw))
    return BevGrid(features=out_grid, spec=query_spec(sources), timestamp=None)


def query_spec(sources):
    return sources[0].spec


@dataclass
class TemporalParams:
    """Everything the decoder owns for one strategy/window combination."""

    strategy: str
    window: int
    short_query: QueryGrid | None = None
    short_attn: DeformAttnParams | None = None
    long_query: QueryGrid | None = None
    long_attn: DeformAttnParams | None = None
    fuse_w1: ad.Tensor | None = None
    fuse_b1: ad.Tensor | None = None
    fuse_w2: ad.Tensor | None = None
    fuse_b2: ad.Tensor | None = None

    def parameters(self):
        out = {}
        if self.short_query is not None:
            out["temporal.short.query"] = self.short_query.features
            out.update(self.short_attn.parameters("temporal.short"))
        if self.long_query is not None:
            out["temporal.long.query"] = self.long_query.features
            out.update(self.long_attn.parameters("temporal.long"))
        for name in ("fuse_w1", "fuse_b1", "fuse_w2", "fuse_b2"):
            t = getattr(self, name)
            if t is not None:
                out[f"temporal.{name.replace('_', '.')}"] = t
        return out


def init_temporal(rng, strategy, window, spec, bev_channels, n_heads=2, n_points=4, dtype=np.float64):
    """Allocate queries, attention blocks and the fusion perceptron.

    The long branch runs at half the BEV width; warp-cat's input width
    grows with the window since it concatenates every remaining frame.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    if strategy != "none" and window < 2:
        raise ValueError(f"strategy {strategy!r} needs window >= 2, got {window}")
    params = TemporalParams(strategy=strategy, window=window)
    if strategy == "none":
        return params
    cp = bev_channels

    def query(width, branch):
        return QueryGrid(
            features=ad.Tensor(rng.normal(0.0, 0.02, (width, spec.ny, spec.nx)).astype(dtype), requires_grad=True),
            branch=branch,
        )

    def fusion(c_in, hidden=None):
        hidden = cp if hidden is None else hidden
        w1 = ad.Tensor(rng.normal(0.0, 1.0 / np.sqrt(c_in), (c_in, hidden)).astype(dtype), requires_grad=True)
        b1 = ad.Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        return w1, b1

    if strategy in ("short", "both"):
        params.short_query = query(cp, "short")
        params.short_attn = init_deform_attn(rng, cp, cp, n_heads, n_points, n_slots=2, dtype=dtype)
    if strategy in ("long", "both"):
        params.long_query = query(cp // 2, "long")
        params.long_attn = init_deform_attn(rng, cp, cp // 2, n_heads, n_points, n_slots=window - 1, dtype=dtype)
    if strategy == "both":
        params.fuse_w1, params.fuse_b1 = fusion(cp + cp // 2)
        params.fuse_w2 = ad.Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(cp), (cp, cp)).astype(dtype), requires_grad=True
        )
        params.fuse_b2 = ad.Tensor(np.zeros(cp, dtype=dtype), requires_grad=True)
    elif strategy == "short":
        params.fuse_w1, params.fuse_b1 = fusion(cp)
    elif strategy == "long":
        params.fuse_w1, params.fuse_b1 = fusion(cp // 2)
    elif strategy == "warp-cat":
        params.fuse_w1, params.fuse_b1 = fusion((window - 1) * cp)
        params.fuse_w2 = ad.Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(cp), (cp, cp)).astype(dtype), requires_grad=True
        )
        params.fuse_b2 = ad.Tensor(np.zeros(cp, dtype=dtype), requires_grad=True)
    return params


def choose_drop_index(window, rng):
    """Uniform drop index over the window."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    return int(rng.integers(window))


def _warped_refs(spec, centers, poses, m, j):
    warped = warp_reference_points(centers, poses[m], poses[j])
    return metric_to_grid(spec, warped)


def _bev_to_flat(bev):
    cp, gh, gw = bev.features.shape
    return ad.transpose(ad.reshape(bev.features, (cp, gh * gw)), (1, 0))


def _flat_to_voxel(flat, spec, z_cells, timestamp):
    cp = flat.shape[1]
    grid = ad.reshape(ad.transpose(flat, (1, 0)), (cp, spec.ny, spec.nx))
    return channel_to_height(BevGrid(features=grid, spec=spec, timestamp=timestamp), z_cells)


def reconstruct_dropped(grids, m, poses, params, rng=None):
    """Rebuild frame m's voxel grid from the remaining frames.

    grids: one VoxelGrid per timestamp (the full window); frame m's grid
    is only read by the bypass strategy.  Returns a VoxelGrid shaped like
    the encoder's output.
    """
    window = len(grids)
    if not 0 <= m < window:
        raise ValueError(f"drop index {m} out of range for window {window}")
    strategy = params.strategy
    if strategy == "none":
        return grids[m]
    if window < 2:
        raise ValueError(f"strategy {strategy!r} needs window >= 2")
    spec = grids[m].spec
    z_cells = grids[m].features.shape[1]
    centers = reference_grid(spec)
    bev = {j: height_to_channel(grids[j]) for j in range(window) if j != m}
    others = sorted(bev)

    if strategy == "warp-cat":
        cols = []
        for j in others:
            refs = _warped_refs(spec, centers, poses, m, j)
            sampled = ad.bilinear_sample_2d(bev[j].features, ad.as_tensor(refs, like=bev[j].features))
            cols.append(sampled)
        fused = ad.concat(cols, axis=1)
        hidden = ad.relu(ad.linear(fused, params.fuse_w1, params.fuse_b1))
        out = ad.linear(hidden, params.fuse_w2, params.fuse_b2)
        return _flat_to_voxel(out, spec, z_cells, m)

    branch_flat = []
    if strategy in ("short", "both"):
        sources, refs, slots = [], [], []
        for slot, j in ((0, m - 1), (1, m + 1)):
            if 0 <= j < window:
                sources.append(bev[j])
                refs.append(_warped_refs(spec, centers, poses, m, j))
                slots.append(slot)
        short_out = deform_attn(params.short_query, refs, sources, params.short_attn, slots)
        branch_flat.append(_bev_to_flat(short_out))
    if strategy in ("long", "both"):
        sources = [bev[j] for j in others]
        refs = [_warped_refs(spec, centers, poses, m, j) for j in others]
        slots = list(range(len(others)))
        long_out = deform_attn(params.long_query, refs, sources, params.long_attn, slots)
        branch_flat.append(_bev_to_flat(long_out))

    if strategy == "both":
        fused = ad.concat(branch_flat, axis=1)
        hidden = ad.relu(ad.linear(fused, params.fuse_w1, params.fuse_b1))
        out = ad.linear(hidden, params.fuse_w2, params.fuse_b2)
    else:
        out = ad.linear(branch_flat[0], params.fuse_w1, params.fuse_b1)
    return _flat_to_voxel(out, spec, z_cells, m)
