"""Depth-aware supervision selection and two-stage patch masking.

Stage 1 hides a patch around every supervision pixel so reconstruction
targets are never directly visible.  Stage 2 partitions what is still
visible into fixed grid cells and hides a fraction of them at random.
Cells that overlap a stage-1 patch are excluded from the stage-2 pool,
which makes the masked-cell count exactly round(ratio * eligible).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .blobio import read_blob, write_blob


@dataclass(frozen=True)
class SupervisionSet:
    """Ground-truth (pixel, color, depth) targets for one view of one frame.

    uv holds (column, row) integer pixel indices.
    """

    uv: np.ndarray
    colors: np.ndarray
    depths: np.ndarray
    frame: int
    view: int

    def __len__(self):
        return self.uv.shape[0]


@dataclass(frozen=True)
class PixelMask:
    """Boolean image mask, True = hidden from the encoder."""

    mask: np.ndarray
    s_ray: int
    s_fill: int
    ratio: float

    @property
    def visible(self):
        return ~self.mask

    def masked_fraction(self):
        return float(self.mask.mean())


def select_supervision_pixels(clip, frame, view, tau, count, seed):
    """Sample pixels with range-sensor depth below tau, without replacement."""
    uv = clip.lidar_uv[frame][view]
    depth = clip.lidar_depth[frame][view]
    keep = depth < tau
    if not keep.any():
        raise ValueError(f"frame {frame} view {view}: no depth samples below tau={tau}")
    uv, depth = uv[keep], depth[keep]
    rng = np.random.default_rng(seed)
    if uv.shape[0] < count:
        warnings.warn(
            f"frame {frame} view {view}: only {uv.shape[0]} candidates below tau, requested {count}"
        )
        chosen = rng.permutation(uv.shape[0])
    else:
        chosen = rng.choice(uv.shape[0], size=count, replace=False)
    uv, depth = uv[chosen], depth[chosen]
    colors = clip.images[frame, view, uv[:, 1], uv[:, 0]].astype(np.float64)
    return SupervisionSet(uv=uv, colors=colors, depths=depth.copy(), frame=frame, view=view)


def _patch_bounds(center, size, limit):
    lo = max(center - size // 2, 0)
    return lo, min(lo + size, limit)


def build_mask(supervision, height, width, s_ray, s_fill, ratio, seed):
    """Two-stage mask; see module docstring for the cell-eligibility rule."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    mask = np.zeros((height, width), dtype=bool)
    if supervision is not None:
        for u, v in supervision.uv:
            r0, r1 = _patch_bounds(int(v), s_ray, height)
            c0, c1 = _patch_bounds(int(u), s_ray, width)
            mask[r0:r1, c0:c1] = True
    cells = []
    for r0 in range(0, height, s_fill):
        for c0 in range(0, width, s_fill):
            cell = (r0, min(r0 + s_fill, height), c0, min(c0 + s_fill, width))
            if not mask[cell[0] : cell[1], cell[2] : cell[3]].any():
                cells.append(cell)
    to_mask = int(round(ratio * len(cells)))
    if to_mask:
        rng = np.random.default_rng(seed)
        for idx in rng.choice(len(cells), size=to_mask, replace=False):
            r0, r1, c0, c1 = cells[idx]
            mask[r0:r1, c0:c1] = True
    return PixelMask(mask=mask, s_ray=s_ray, s_fill=s_fill, ratio=ratio)


def apply_mask(image, mask):
    """Zero hidden pixels; returns (masked image, visibility channel)."""
    img = np.asarray(image)
    if img.shape[:2] != mask.mask.shape:
        raise ValueError(f"image {img.shape[:2]} vs mask {mask.mask.shape}")
    visible = mask.visible.astype(img.dtype)
    return img * visible[:, :, None], visible


def downsample_mask(mask, stride):
    """Feature-resolution mask: a cell is visible iff any covered pixel is.

    Accepts a PixelMask or a bare boolean array (True = hidden); returns
    a boolean array.  Border cells cover the partial remainder.
    """
    m = mask.mask if isinstance(mask, PixelMask) else np.asarray(mask, dtype=bool)
    if stride == 1:
        return m.copy()
    h, w = m.shape
    out_h = -(-h // stride)
    out_w = -(-w // stride)
    visible = np.zeros((out_h, out_w), dtype=bool)
    pad_h, pad_w = out_h * stride, out_w * stride
    padded = np.ones((pad_h, pad_w), dtype=bool)
    padded[:h, :w] = m
    blocks = ~padded.reshape(out_h, stride, out_w, stride)
    visible = blocks.any(axis=(1, 3))
    return ~visible


def save_masks(path, masks):
    """Serialize {(frame, view): PixelMask} into one blob."""
    arrays = {}
    for (t, v), m in sorted(masks.items()):
        arrays[f"mask_{t}_{v}"] = m.mask.astype(np.uint8)
        arrays[f"meta_{t}_{v}"] = np.array([m.s_ray, m.s_fill, m.ratio])
    write_blob(path, arrays)


def load_masks(path):
    arrays = read_blob(path)
    masks = {}
    for name, data in arrays.items():
        if not name.startswith("mask_"):
            continue
        _, t, v = name.split("_")
        s_ray, s_fill, ratio = arrays[f"meta_{t}_{v}"]
        masks[(int(t), int(v))] = PixelMask(
            mask=data.astype(bool), s_ray=int(s_ray), s_fill=int(s_fill), ratio=float(ratio)
        )
    return masks
