# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core: direct-loop twins of ``_ref``.

Single-threaded on purpose; reruns must be bit-reproducible.  Accumulation
happens in double precision regardless of the input dtype, matching the
reference backend.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "fast"

ctypedef fused floating:
    float
    double


cdef inline object _empty(shape, bint single):
    return np.zeros(shape, dtype=np.float32 if single else np.float64)


def conv2d_forward(floating[:, :, ::1] x, floating[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t ci = x.shape[0], h = x.shape[1], win = x.shape[2]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (win + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: empty output for input {h}x{win}, kernel {kh}x{kw}")
    out_np = _empty((co, ho, wo), floating is float)
    cdef floating[:, :, ::1] out = out_np
    cdef Py_ssize_t oc, ic, i, j, oy, ox, iy, ix
    cdef floating wv
    with nogil:
        for oc in range(co):
            for ic in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[oc, ic, i, j]
                        for oy in range(ho):
                            iy = oy * stride - pad + i
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride - pad + j
                                if 0 <= ix < win:
                                    out[oc, oy, ox] += wv * x[ic, iy, ix]
    return out_np


def conv2d_grad_input(floating[:, :, ::1] gy, floating[:, :, :, ::1] w,
                      int stride, int pad, Py_ssize_t h, Py_ssize_t win):
    cdef Py_ssize_t co = w.shape[0], ci = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2]
    gx_np = _empty((ci, h, win), floating is float)
    cdef floating[:, :, ::1] gx = gx_np
    cdef Py_ssize_t oc, ic, i, j, oy, ox, iy, ix
    cdef floating wv
    with nogil:
        for oc in range(co):
            for ic in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[oc, ic, i, j]
                        for oy in range(ho):
                            iy = oy * stride - pad + i
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride - pad + j
                                if 0 <= ix < win:
                                    gx[ic, iy, ix] += wv * gy[oc, oy, ox]
    return gx_np


def conv2d_grad_weight(floating[:, :, ::1] gy, floating[:, :, ::1] x,
                       int stride, int pad, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t ci = x.shape[0], h = x.shape[1], win = x.shape[2]
    cdef Py_ssize_t co = gy.shape[0], ho = gy.shape[1], wo = gy.shape[2]
    gw_np = _empty((co, ci, kh, kw), floating is float)
    cdef floating[:, :, :, ::1] gw = gw_np
    cdef Py_ssize_t oc, ic, i, j, oy, ox, iy, ix
    cdef double acc
    with nogil:
        for oc in range(co):
            for ic in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        acc = 0.0
                        for oy in range(ho):
                            iy = oy * stride - pad + i
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride - pad + j
                                if 0 <= ix < win:
                                    acc += x[ic, iy, ix] * gy[oc, oy, ox]
                        gw[oc, ic, i, j] = <floating> acc
    return gw_np


def bilinear2d_forward(floating[:, :, ::1] grid, floating[:, ::1] coords):
    cdef Py_ssize_t c = grid.shape[0], h = grid.shape[1], w = grid.shape[2]
    cdef Py_ssize_t n = coords.shape[0]
    out_np = _empty((n, c), floating is float)
    cdef floating[:, ::1] out = out_np
    cdef Py_ssize_t k, ch, x0, y0, xi, yi
    cdef long dx, dy
    cdef double x, y, fx, fy, wgt
    with nogil:
        for k in range(n):
            x = coords[k, 0]
            y = coords[k, 1]
            x0 = <Py_ssize_t> floor(x)
            y0 = <Py_ssize_t> floor(y)
            fx = x - x0
            fy = y - y0
            for dy in range(2):
                yi = y0 + dy
                if yi < 0 or yi >= h:
                    continue
                for dx in range(2):
                    xi = x0 + dx
                    if xi < 0 or xi >= w:
                        continue
                    wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
                    for ch in range(c):
                        out[k, ch] += <floating> (wgt * grid[ch, yi, xi])
    return out_np


def bilinear2d_backward(floating[:, :, ::1] grid, floating[:, ::1] coords,
                        floating[:, ::1] gy):
    cdef Py_ssize_t c = grid.shape[0], h = grid.shape[1], w = grid.shape[2]
    cdef Py_ssize_t n = coords.shape[0]
    cdef double[:, :, ::1] acc = np.zeros((c, h, w), dtype=np.float64)
    gcoords_np = _empty((n, 2), floating is float)
    cdef floating[:, ::1] gcoords = gcoords_np
    cdef Py_ssize_t k, ch, x0, y0, xi, yi
    cdef long dx, dy
    cdef double x, y, fx, fy, wx, wy, v, gx, gyy
    with nogil:
        for k in range(n):
            x = coords[k, 0]
            y = coords[k, 1]
            x0 = <Py_ssize_t> floor(x)
            y0 = <Py_ssize_t> floor(y)
            fx = x - x0
            fy = y - y0
            gx = 0.0
            gyy = 0.0
            for dy in range(2):
                yi = y0 + dy
                if yi < 0 or yi >= h:
                    continue
                for dx in range(2):
                    xi = x0 + dx
                    if xi < 0 or xi >= w:
                        continue
                    wx = fx if dx else 1.0 - fx
                    wy = fy if dy else 1.0 - fy
                    v = 0.0
                    for ch in range(c):
                        acc[ch, yi, xi] += wx * wy * gy[k, ch]
                        v += gy[k, ch] * grid[ch, yi, xi]
                    gx += v * (1.0 if dx else -1.0) * wy
                    gyy += v * (1.0 if dy else -1.0) * wx
            gcoords[k, 0] = <floating> gx
            gcoords[k, 1] = <floating> gyy
    ggrid = np.asarray(acc).astype(np.float32 if floating is float else np.float64)
    return ggrid, gcoords_np


def trilinear3d_forward(floating[:, :, :, ::1] grid, floating[:, ::1] coords, bint border):
    cdef Py_ssize_t c = grid.shape[0], d = grid.shape[1], h = grid.shape[2], w = grid.shape[3]
    cdef Py_ssize_t n = coords.shape[0]
    out_np = _empty((n, c), floating is float)
    cdef floating[:, ::1] out = out_np
    cdef Py_ssize_t k, ch, x0, y0, z0, xi, yi, zi
    cdef long dx, dy, dz
    cdef double x, y, z, fx, fy, fz, wgt
    with nogil:
        for k in range(n):
            x = coords[k, 0]
            y = coords[k, 1]
            z = coords[k, 2]
            if border:
                x = _clip(x, 0, w - 1)
                y = _clip(y, 0, h - 1)
                z = _clip(z, 0, d - 1)
            x0 = <Py_ssize_t> floor(x)
            y0 = <Py_ssize_t> floor(y)
            z0 = <Py_ssize_t> floor(z)
            fx = x - x0
            fy = y - y0
            fz = z - z0
            for dz in range(2):
                zi = z0 + dz
                if zi < 0 or zi >= d:
                    continue
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= h:
                        continue
                    for dx in range(2):
                        xi = x0 + dx
                        if xi < 0 or xi >= w:
                            continue
                        wgt = ((fx if dx else 1.0 - fx)
                               * (fy if dy else 1.0 - fy)
                               * (fz if dz else 1.0 - fz))
                        for ch in range(c):
                            out[k, ch] += <floating> (wgt * grid[ch, zi, yi, xi])
    return out_np


def trilinear3d_backward(floating[:, :, :, ::1] grid, floating[:, ::1] coords,
                         floating[:, ::1] gy, bint border):
    cdef Py_ssize_t c = grid.shape[0], d = grid.shape[1], h = grid.shape[2], w = grid.shape[3]
    cdef Py_ssize_t n = coords.shape[0]
    cdef double[:, :, :, ::1] acc = np.zeros((c, d, h, w), dtype=np.float64)
    gcoords_np = _empty((n, 3), floating is float)
    cdef floating[:, ::1] gcoords = gcoords_np
    cdef Py_ssize_t k, ch, x0, y0, z0, xi, yi, zi
    cdef long dx, dy, dz
    cdef double x, y, z, fx, fy, fz, wx, wy, wz, v, gx, gyy, gz
    cdef double inx, iny, inz
    with nogil:
        for k in range(n):
            x = coords[k, 0]
            y = coords[k, 1]
            z = coords[k, 2]
            inx = iny = inz = 1.0
            if border:
                inx = 1.0 if 0 < x < w - 1 else 0.0
                iny = 1.0 if 0 < y < h - 1 else 0.0
                inz = 1.0 if 0 < z < d - 1 else 0.0
                x = _clip(x, 0, w - 1)
                y = _clip(y, 0, h - 1)
                z = _clip(z, 0, d - 1)
            x0 = <Py_ssize_t> floor(x)
            y0 = <Py_ssize_t> floor(y)
            z0 = <Py_ssize_t> floor(z)
            fx = x - x0
            fy = y - y0
            fz = z - z0
            gx = 0.0
            gyy = 0.0
            gz = 0.0
            for dz in range(2):
                zi = z0 + dz
                if zi < 0 or zi >= d:
                    continue
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= h:
                        continue
                    for dx in range(2):
                        xi = x0 + dx
                        if xi < 0 or xi >= w:
                            continue
                        wx = fx if dx else 1.0 - fx
                        wy = fy if dy else 1.0 - fy
                        wz = fz if dz else 1.0 - fz
                        v = 0.0
                        for ch in range(c):
                            acc[ch, zi, yi, xi] += wx * wy * wz * gy[k, ch]
                            v += gy[k, ch] * grid[ch, zi, yi, xi]
                        gx += v * (1.0 if dx else -1.0) * wy * wz
                        gyy += v * (1.0 if dy else -1.0) * wx * wz
                        gz += v * (1.0 if dz else -1.0) * wx * wy
            gcoords[k, 0] = <floating> (gx * inx)
            gcoords[k, 1] = <floating> (gyy * iny)
            gcoords[k, 2] = <floating> (gz * inz)
    ggrid = np.asarray(acc).astype(np.float32 if floating is float else np.float64)
    return ggrid, gcoords_np


def scatter_add(floating[::1] values, cnp.int64_t[::1] idx, Py_ssize_t size):
    cdef Py_ssize_t n = values.shape[0]
    cdef double[::1] acc = np.zeros(size, dtype=np.float64)
    cdef Py_ssize_t k
    with nogil:
        for k in range(n):
            acc[idx[k]] += values[k]
    return np.asarray(acc).astype(np.float32 if floating is float else np.float64)


cdef extern from "math.h" nogil:
    double floor(double x)


cdef inline double _clip(double v, double lo, double hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v
