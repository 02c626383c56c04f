"""Pure-numpy reference kernels.

Fallback backend used when the compiled extension is unavailable (or forced
via MV4D_KERNELS=ref).  Every function here has a signature-identical twin in
the Cython module; parity between the two is covered by tests.
"""

import numpy as np

BACKEND = "ref"


def _out_hw(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: empty output for input {h}x{w}, kernel {kh}x{kw}")
    return ho, wo


def _im2col(x, kh, kw, stride, pad):
    """(Ci,H,W) -> (Ci*kh*kw, Ho*Wo) patch matrix."""
    ci, h, w = x.shape
    ho, wo = _out_hw(h, w, kh, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((ci, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(ci * kh * kw, ho * wo)


def conv2d_forward(x, w, stride, pad):
    co = w.shape[0]
    ho, wo = _out_hw(x.shape[1], x.shape[2], w.shape[2], w.shape[3], stride, pad)
    cols = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    return (w.reshape(co, -1) @ cols).reshape(co, ho, wo)


def conv2d_grad_input(gy, w, stride, pad, h, w_in):
    co, ci, kh, kw = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    # (Ci*kh*kw, Ho*Wo) columns of the input gradient, then fold back.
    gcols = (w.reshape(co, -1).T @ gy.reshape(co, -1)).reshape(ci, kh, kw, ho, wo)
    gx = np.zeros((ci, h + 2 * pad, w_in + 2 * pad), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
    if pad:
        gx = gx[:, pad : pad + h, pad : pad + w_in]
    return np.ascontiguousarray(gx)


def conv2d_grad_weight(gy, x, stride, pad, kh, kw):
    co = gy.shape[0]
    cols = _im2col(x, kh, kw, stride, pad)
    return (gy.reshape(co, -1) @ cols.T).reshape(co, x.shape[0], kh, kw)


def bilinear2d_forward(grid, coords):
    """Sample (C,H,W) at coords (N,2) given as (x,y); zero padding outside."""
    c, h, w = grid.shape
    x, y = coords[:, 0], coords[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    flat = grid.reshape(c, -1)
    out = np.zeros((coords.shape[0], c), dtype=grid.dtype)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy) * ok
            idx = np.where(ok, yi * w + xi, 0)
            out += wgt[:, None] * flat[:, idx].T
    return out


def bilinear2d_backward(grid, coords, gy):
    c, h, w = grid.shape
    x, y = coords[:, 0], coords[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    flat = grid.reshape(c, -1)
    acc = np.zeros((h * w, c), dtype=np.float64)
    gx = np.zeros(coords.shape[0], dtype=np.float64)
    gyc = np.zeros(coords.shape[0], dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wx = fx if dx else 1 - fx
            wy = fy if dy else 1 - fy
            idx = np.where(ok, yi * w + xi, 0)
            np.add.at(acc, idx, (gy * (wx * wy * ok)[:, None]).astype(np.float64))
            v = np.einsum("nc,nc->n", gy, flat[:, idx].T) * ok
            gx += v * (1.0 if dx else -1.0) * wy
            gyc += v * (1.0 if dy else -1.0) * wx
    ggrid = acc.T.reshape(c, h, w).astype(grid.dtype)
    gcoords = np.stack([gx, gyc], axis=1).astype(coords.dtype)
    return ggrid, gcoords


def trilinear3d_forward(grid, coords, border):
    """Sample (C,D,H,W) at coords (N,3) given as (x,y,z) -> (W,H,D) axes."""
    c, d, h, w = grid.shape
    x, y, z = coords[:, 0].copy(), coords[:, 1].copy(), coords[:, 2].copy()
    if border:
        x = np.clip(x, 0, w - 1)
        y = np.clip(y, 0, h - 1)
        z = np.clip(z, 0, d - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    z0 = np.floor(z).astype(np.int64)
    fx, fy, fz = x - x0, y - y0, z - z0
    flat = grid.reshape(c, -1)
    out = np.zeros((coords.shape[0], c), dtype=grid.dtype)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                xi, yi, zi = x0 + dx, y0 + dy, z0 + dz
                ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (zi >= 0) & (zi < d)
                wgt = (
                    (fx if dx else 1 - fx)
                    * (fy if dy else 1 - fy)
                    * (fz if dz else 1 - fz)
                    * ok
                )
                idx = np.where(ok, (zi * h + yi) * w + xi, 0)
                out += wgt[:, None] * flat[:, idx].T
    return out


def trilinear3d_backward(grid, coords, gy, border):
    c, d, h, w = grid.shape
    x, y, z = coords[:, 0].copy(), coords[:, 1].copy(), coords[:, 2].copy()
    if border:
        inx = (x > 0) & (x < w - 1)
        iny = (y > 0) & (y < h - 1)
        inz = (z > 0) & (z < d - 1)
        x = np.clip(x, 0, w - 1)
        y = np.clip(y, 0, h - 1)
        z = np.clip(z, 0, d - 1)
    else:
        inx = iny = inz = 1.0
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    z0 = np.floor(z).astype(np.int64)
    fx, fy, fz = x - x0, y - y0, z - z0
    flat = grid.reshape(c, -1)
    acc = np.zeros((d * h * w, c), dtype=np.float64)
    gx = np.zeros(coords.shape[0], dtype=np.float64)
    gyc = np.zeros(coords.shape[0], dtype=np.float64)
    gz = np.zeros(coords.shape[0], dtype=np.float64)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                xi, yi, zi = x0 + dx, y0 + dy, z0 + dz
                ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (zi >= 0) & (zi < d)
                wx = fx if dx else 1 - fx
                wy = fy if dy else 1 - fy
                wz = fz if dz else 1 - fz
                idx = np.where(ok, (zi * h + yi) * w + xi, 0)
                np.add.at(acc, idx, (gy * (wx * wy * wz * ok)[:, None]).astype(np.float64))
                v = np.einsum("nc,nc->n", gy, flat[:, idx].T) * ok
                gx += v * (1.0 if dx else -1.0) * wy * wz
                gyc += v * (1.0 if dy else -1.0) * wx * wz
                gz += v * (1.0 if dz else -1.0) * wx * wy
    ggrid = acc.T.reshape(c, d, h, w).astype(grid.dtype)
    gcoords = np.stack([gx * inx, gyc * iny, gz * inz], axis=1).astype(coords.dtype)
    return ggrid, gcoords


def scatter_add(values, idx, size):
    """out[idx[k]] += values[k] over flat arrays; accumulation in float64."""
    out = np.bincount(idx, weights=values.astype(np.float64), minlength=size)
    return out.astype(values.dtype)
