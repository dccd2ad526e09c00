"""Exact voxel-intersection ray traversal kernels (numba).

All kernels share one Siddon-style marcher so the forward and adjoint
operators use identical intersection weights, which keeps the operator
pair exactly matched. Lengths are in mm; rays are given by a common
source point and one direction per detector pixel.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

# Generous upper bound on voxel visits per ray.
_CAP_PAD = 8


@njit(cache=True)
def _trace_ray(sx, sy, sz, dx, dy, dz, ox, oy, oz, h, nx, ny, nz, idx_out, len_out):
    """March one ray through the grid; fill voxel indices and segment
    lengths (mm); return the number of segments."""
    norm = np.sqrt(dx * dx + dy * dy + dz * dz)
    if norm == 0.0:
        return 0
    dx /= norm
    dy /= norm
    dz /= norm

    hx0, hx1 = ox, ox + nx * h
    hy0, hy1 = oy, oy + ny * h
    hz0, hz1 = oz, oz + nz * h

    tmin = -1e30
    tmax = 1e30
    if abs(dx) < 1e-12:
        if sx < hx0 or sx > hx1:
            return 0
    else:
        ta = (hx0 - sx) / dx
        tb = (hx1 - sx) / dx
        if ta > tb:
            ta, tb = tb, ta
        if ta > tmin:
            tmin = ta
        if tb < tmax:
            tmax = tb
    if abs(dy) < 1e-12:
        if sy < hy0 or sy > hy1:
            return 0
    else:
        ta = (hy0 - sy) / dy
        tb = (hy1 - sy) / dy
        if ta > tb:
            ta, tb = tb, ta
        if ta > tmin:
            tmin = ta
        if tb < tmax:
            tmax = tb
    if abs(dz) < 1e-12:
        if sz < hz0 or sz > hz1:
            return 0
    else:
        ta = (hz0 - sz) / dz
        tb = (hz1 - sz) / dz
        if ta > tb:
            ta, tb = tb, ta
        if ta > tmin:
            tmin = ta
        if tb < tmax:
            tmax = tb
    if tmin < 0.0:
        tmin = 0.0
    if tmax <= tmin:
        return 0

    nudge = 1e-9 * (tmax - tmin + h)
    px = sx + dx * (tmin + nudge)
    py = sy + dy * (tmin + nudge)
    pz = sz + dz * (tmin + nudge)
    ix = int(np.floor((px - ox) / h))
    iy = int(np.floor((py - oy) / h))
    iz = int(np.floor((pz - oz) / h))
    if ix < 0:
        ix = 0
    if ix > nx - 1:
        ix = nx - 1
    if iy < 0:
        iy = 0
    if iy > ny - 1:
        iy = ny - 1
    if iz < 0:
        iz = 0
    if iz > nz - 1:
        iz = nz - 1

    if dx > 1e-12:
        stepx, dtx = 1, h / dx
        tx = (ox + (ix + 1) * h - sx) / dx
    elif dx < -1e-12:
        stepx, dtx = -1, -h / dx
        tx = (ox + ix * h - sx) / dx
    else:
        stepx, dtx, tx = 0, 0.0, 1e30
    if dy > 1e-12:
        stepy, dty = 1, h / dy
        ty = (oy + (iy + 1) * h - sy) / dy
    elif dy < -1e-12:
        stepy, dty = -1, -h / dy
        ty = (oy + iy * h - sy) / dy
    else:
        stepy, dty, ty = 0, 0.0, 1e30
    if dz > 1e-12:
        stepz, dtz = 1, h / dz
        tz = (oz + (iz + 1) * h - sz) / dz
    elif dz < -1e-12:
        stepz, dtz = -1, -h / dz
        tz = (oz + iz * h - sz) / dz
    else:
        stepz, dtz, tz = 0, 0.0, 1e30

    t = tmin
    count = 0
    cap = idx_out.shape[0]
    tiny = 1e-12 * (1.0 + abs(tmax))
    while t < tmax - tiny and count < cap:
        tn = tx
        if ty < tn:
            tn = ty
        if tz < tn:
            tn = tz
        if tn > tmax:
            tn = tmax
        seg = tn - t
        if seg > 0.0:
            idx_out[count, 0] = ix
            idx_out[count, 1] = iy
            idx_out[count, 2] = iz
            len_out[count] = seg
            count += 1
        if tn == tx:
            ix += stepx
            tx += dtx
        if tn == ty:
            iy += stepy
            ty += dty
        if tn == tz:
            iz += stepz
            tz += dtz
        t = tn
        if ix < 0 or ix >= nx or iy < 0 or iy >= ny or iz < 0 or iz >= nz:
            break
    return count


@njit(cache=True, parallel=True)
def forward_values(values, origin, h, src, dirs, out):
    """out[p] = sum of segment_length * values[voxel] along ray p."""
    nx, ny, nz = values.shape
    cap = nx + ny + nz + _CAP_PAD
    for p in prange(dirs.shape[0]):
        idx = np.empty((cap, 3), dtype=np.int32)
        seg = np.empty(cap, dtype=np.float64)
        n = _trace_ray(
            src[0], src[1], src[2],
            dirs[p, 0], dirs[p, 1], dirs[p, 2],
            origin[0], origin[1], origin[2],
            h, nx, ny, nz, idx, seg,
        )
        acc = 0.0
        for k in range(n):
            acc += seg[k] * values[idx[k, 0], idx[k, 1], idx[k, 2]]
        out[p] = acc


@njit(cache=True, parallel=True)
def forward_materials(labels, densities, origin, h, src, dirs, out):
    """out[m, p] = density-weighted path (mm * g/cm^3) of material m."""
    nx, ny, nz = labels.shape
    cap = nx + ny + nz + _CAP_PAD
    for p in prange(dirs.shape[0]):
        idx = np.empty((cap, 3), dtype=np.int32)
        seg = np.empty(cap, dtype=np.float64)
        n = _trace_ray(
            src[0], src[1], src[2],
            dirs[p, 0], dirs[p, 1], dirs[p, 2],
            origin[0], origin[1], origin[2],
            h, nx, ny, nz, idx, seg,
        )
        for k in range(n):
            i0, i1, i2 = idx[k, 0], idx[k, 1], idx[k, 2]
            out[labels[i0, i1, i2], p] += seg[k] * densities[i0, i1, i2]


@njit(cache=True)
def backproject_values(pixel_values, origin, h, src, dirs, out_vol):
    """Exact adjoint of forward_values: scatter pixel values into voxels."""
    nx, ny, nz = out_vol.shape
    cap = nx + ny + nz + _CAP_PAD
    idx = np.empty((cap, 3), dtype=np.int32)
    seg = np.empty(cap, dtype=np.float64)
    for p in range(dirs.shape[0]):
        v = pixel_values[p]
        if v == 0.0:
            continue
        n = _trace_ray(
            src[0], src[1], src[2],
            dirs[p, 0], dirs[p, 1], dirs[p, 2],
            origin[0], origin[1], origin[2],
            h, nx, ny, nz, idx, seg,
        )
        for k in range(n):
            out_vol[idx[k, 0], idx[k, 1], idx[k, 2]] += seg[k] * v


@njit(cache=True)
def box_chords(src, dirs, lo, hi, out):
    """out[p] = chord length (mm) of ray p inside the box [lo, hi]."""
    for p in range(dirs.shape[0]):
        dx = dirs[p, 0]
        dy = dirs[p, 1]
        dz = dirs[p, 2]
        norm = np.sqrt(dx * dx + dy * dy + dz * dz)
        if norm == 0.0:
            out[p] = 0.0
            continue
        dx /= norm
        dy /= norm
        dz /= norm
        tmin = 0.0
        tmax = 1e30
        ok = True
        for ax in range(3):
            if ax == 0:
                s, d = src[0], dx
            elif ax == 1:
                s, d = src[1], dy
            else:
                s, d = src[2], dz
            if abs(d) < 1e-12:
                if s < lo[ax] or s > hi[ax]:
                    ok = False
                    break
            else:
                ta = (lo[ax] - s) / d
                tb = (hi[ax] - s) / d
                if ta > tb:
                    ta, tb = tb, ta
                if ta > tmin:
                    tmin = ta
                if tb < tmax:
                    tmax = tb
        out[p] = tmax - tmin if ok and tmax > tmin else 0.0
