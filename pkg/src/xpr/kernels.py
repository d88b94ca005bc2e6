"""Hot inner loops for projection and normal estimation.

Two interchangeable backends: numba @njit kernels (default) and a pure-numpy
path selected with XPR_NO_NUMBA=1. Both compute identical arithmetic so
results are bit-equal; `xpr bench` compares their throughput.
"""
from __future__ import annotations

import os

import numpy as np

_USE_NUMBA = os.environ.get("XPR_NO_NUMBA", "0") not in ("1", "true", "yes")

if _USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        _USE_NUMBA = False


def backend_name() -> str:
    return "numba" if _USE_NUMBA else "numpy"


# ---------------------------------------------------------------- scatter-min

def _fill_grid_py(rows, cols, ranges, labels, h, w):
    depth = np.zeros((h, w), dtype=np.float64)
    label = np.zeros((h, w), dtype=np.uint16)
    winner = np.full((h, w), -1, dtype=np.int64)
    for i in range(rows.shape[0]):
        r = rows[i]
        c = cols[i]
        rng = ranges[i]
        j = winner[r, c]
        if j < 0 or rng < depth[r, c] or (rng == depth[r, c] and i < j):
            depth[r, c] = rng
            label[r, c] = labels[i]
            winner[r, c] = i
    return depth, label


def _fill_grid_np(rows, cols, ranges, labels, h, w):
    n = rows.shape[0]
    depth = np.zeros((h, w), dtype=np.float64)
    label = np.zeros((h, w), dtype=np.uint16)
    if n == 0:
        return depth, label
    # stable sort by (range, original index); first hit per cell wins
    order = np.lexsort((np.arange(n), ranges))
    cell = rows[order].astype(np.int64) * w + cols[order]
    _, first = np.unique(cell, return_index=True)
    keep = order[first]
    depth.flat[cell[first]] = ranges[keep]
    label.flat[cell[first]] = labels[keep]
    return depth, label


# ------------------------------------------------------------------- normals

def _normals_py(depth, cos_az, sin_az, cos_el, sin_el):
    h, w = depth.shape
    normals = np.zeros((h, w, 3), dtype=np.float64)
    for r in range(h):
        for c in range(w):
            d = depth[r, c]
            if d == 0.0:
                continue
            px = d * cos_el[r] * cos_az[c]
            py = d * cos_el[r] * sin_az[c]
            pz = d * sin_el[r]
            ok = False
            if c + 1 < w and r + 1 < h:
                dr = depth[r, c + 1]
                dd = depth[r + 1, c]
                if dr > 0.0 and dd > 0.0:
                    ax = dr * cos_el[r] * cos_az[c + 1] - px
                    ay = dr * cos_el[r] * sin_az[c + 1] - py
                    az = dr * sin_el[r] - pz
                    bx = dd * cos_el[r + 1] * cos_az[c] - px
                    by = dd * cos_el[r + 1] * sin_az[c] - py
                    bz = dd * sin_el[r + 1] - pz
                    nx = ay * bz - az * by
                    ny = az * bx - ax * bz
                    nz = ax * by - ay * bx
                    nn = np.sqrt(nx * nx + ny * ny + nz * nz)
                    if nn > 1e-12:
                        nx /= nn
                        ny /= nn
                        nz /= nn
                        if nx * px + ny * py + nz * pz > 0.0:
                            nx = -nx
                            ny = -ny
                            nz = -nz
                        normals[r, c, 0] = nx
                        normals[r, c, 1] = ny
                        normals[r, c, 2] = nz
                        ok = True
            if not ok:
                # fall back to the direction looking back at the sensor
                normals[r, c, 0] = -px / d
                normals[r, c, 1] = -py / d
                normals[r, c, 2] = -pz / d
    return normals


def _normals_np(depth, cos_az, sin_az, cos_el, sin_el):
    h, w = depth.shape
    # association matches the scalar kernel so both backends are bit-equal
    px = (depth * cos_el[:, None]) * cos_az[None, :]
    py = (depth * cos_el[:, None]) * sin_az[None, :]
    pz = depth * sin_el[:, None]

    valid = depth > 0.0
    usable = np.zeros((h, w), dtype=bool)
    usable[: h - 1, : w - 1] = (
        valid[: h - 1, : w - 1] & valid[: h - 1, 1:] & valid[1:, : w - 1]
    )

    ax = np.zeros((h, w))
    ay = np.zeros((h, w))
    az = np.zeros((h, w))
    bx = np.zeros((h, w))
    by = np.zeros((h, w))
    bz = np.zeros((h, w))
    ax[: h - 1, : w - 1] = px[: h - 1, 1:] - px[: h - 1, : w - 1]
    ay[: h - 1, : w - 1] = py[: h - 1, 1:] - py[: h - 1, : w - 1]
    az[: h - 1, : w - 1] = pz[: h - 1, 1:] - pz[: h - 1, : w - 1]
    bx[: h - 1, : w - 1] = px[1:, : w - 1] - px[: h - 1, : w - 1]
    by[: h - 1, : w - 1] = py[1:, : w - 1] - py[: h - 1, : w - 1]
    bz[: h - 1, : w - 1] = pz[1:, : w - 1] - pz[: h - 1, : w - 1]

    nx = ay * bz - az * by
    ny = az * bx - ax * bz
    nz = ax * by - ay * bx
    nn = np.sqrt(nx * nx + ny * ny + nz * nz)
    usable &= nn > 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        nx = np.where(usable, nx / nn, 0.0)
        ny = np.where(usable, ny / nn, 0.0)
        nz = np.where(usable, nz / nn, 0.0)
    flip = usable & (nx * px + ny * py + nz * pz > 0.0)
    nx = np.where(flip, -nx, nx)
    ny = np.where(flip, -ny, ny)
    nz = np.where(flip, -nz, nz)

    fallback = valid & ~usable
    with np.errstate(invalid="ignore", divide="ignore"):
        nx = np.where(fallback, -px / depth, nx)
        ny = np.where(fallback, -py / depth, ny)
        nz = np.where(fallback, -pz / depth, nz)
    return np.stack([nx, ny, nz], axis=-1)


if _USE_NUMBA:
    _fill_grid_nb = njit(cache=True)(_fill_grid_py)
    _normals_nb = njit(cache=True)(_normals_py)
    fill_grid = _fill_grid_nb
    compute_normals = _normals_nb
else:
    fill_grid = _fill_grid_np
    compute_normals = _normals_np

# exported for the backend-equivalence tests and the kernel benchmark
fill_grid_numpy = _fill_grid_np
compute_normals_numpy = _normals_np
fill_grid_numba = _fill_grid_nb if _USE_NUMBA else None
compute_normals_numba = _normals_nb if _USE_NUMBA else None
