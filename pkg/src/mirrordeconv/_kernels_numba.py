"""Numba-accelerated versions of the kernels in ``_kernels_numpy``.

Same signatures, same semantics.  Gather-style kernels (every output
element is an independent reduction in a fixed order) run under prange
and are bit-reproducible for any thread count; scatter-style adjoints
and the parameter-gradient reductions stay serial for the same reason.
All functions are cached to keep CLI start-up cheap after the first run.
"""

import numba as nb
import numpy as np

_JIT = {"cache": True, "nogil": True}


@nb.njit(parallel=True, **_JIT)
def warp_bilinear(img, mat, off):
    h, w = img.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    m00 = mat[0, 0]
    m01 = mat[0, 1]
    m10 = mat[1, 0]
    m11 = mat[1, 1]
    tx = off[0]
    ty = off[1]
    out = np.empty((h, w), dtype=np.float64)
    for i in nb.prange(h):
        yr = i - cy
        for j in range(w):
            xr = j - cx
            sx = m00 * xr + m01 * yr + tx + cx
            sy = m10 * xr + m11 * yr + ty + cy
            if sx < 0.0:
                sx = 0.0
            elif sx > w - 1.0:
                sx = w - 1.0
            if sy < 0.0:
                sy = 0.0
            elif sy > h - 1.0:
                sy = h - 1.0
            x0 = int(np.floor(sx))
            y0 = int(np.floor(sy))
            fx = sx - x0
            fy = sy - y0
            if fx == 0.0 and fy == 0.0:
                out[i, j] = img[y0, x0]
                continue
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            out[i, j] = ((1.0 - fx) * (1.0 - fy) * img[y0, x0]
                         + fx * (1.0 - fy) * img[y0, x1]
                         + (1.0 - fx) * fy * img[y1, x0]
                         + fx * fy * img[y1, x1])
    return out


@nb.njit(**_JIT)
def warp_bilinear_adjoint(res, mat, off):
    h, w = res.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        yr = i - cy
        for j in range(w):
            xr = j - cx
            sx = mat[0, 0] * xr + mat[0, 1] * yr + off[0] + cx
            sy = mat[1, 0] * xr + mat[1, 1] * yr + off[1] + cy
            if sx < 0.0:
                sx = 0.0
            elif sx > w - 1.0:
                sx = w - 1.0
            if sy < 0.0:
                sy = 0.0
            elif sy > h - 1.0:
                sy = h - 1.0
            x0 = int(np.floor(sx))
            y0 = int(np.floor(sy))
            fx = sx - x0
            fy = sy - y0
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            r = res[i, j]
            out[y0, x0] += (1.0 - fx) * (1.0 - fy) * r
            out[y0, x1] += fx * (1.0 - fy) * r
            out[y1, x0] += (1.0 - fx) * fy * r
            out[y1, x1] += fx * fy * r
    return out


@nb.njit(**_JIT)
def warp_affine_grad(img, mat, off, upstream):
    h, w = img.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    gmat = np.zeros((2, 2), dtype=np.float64)
    goff = np.zeros(2, dtype=np.float64)
    for i in range(h):
        yr = i - cy
        for j in range(w):
            xr = j - cx
            sx = mat[0, 0] * xr + mat[0, 1] * yr + off[0] + cx
            sy = mat[1, 0] * xr + mat[1, 1] * yr + off[1] + cy
            in_x = 0.0 < sx < w - 1.0
            in_y = 0.0 < sy < h - 1.0
            if not (in_x or in_y):
                continue
            if sx < 0.0:
                sx = 0.0
            elif sx > w - 1.0:
                sx = w - 1.0
            if sy < 0.0:
                sy = 0.0
            elif sy > h - 1.0:
                sy = h - 1.0
            x0 = int(np.floor(sx))
            y0 = int(np.floor(sy))
            fx = sx - x0
            fy = sy - y0
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            v00 = img[y0, x0]
            v01 = img[y0, x1]
            v10 = img[y1, x0]
            v11 = img[y1, x1]
            u = upstream[i, j]
            if in_x:
                gx = u * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
                gmat[0, 0] += gx * xr
                gmat[0, 1] += gx * yr
                goff[0] += gx
            if in_y:
                gy = u * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
                gmat[1, 0] += gy * xr
                gmat[1, 1] += gy * yr
                goff[1] += gy
    return gmat, goff


@nb.njit(parallel=True, **_JIT)
def conv2d_rep(img, kern):
    h, w = img.shape
    k = kern.shape[0]
    m = k // 2
    out = np.empty((h, w), dtype=np.float64)
    for i in nb.prange(h):
        for j in range(w):
            acc = 0.0
            for a in range(k):
                ii = i - (a - m)
                if ii < 0:
                    ii = 0
                elif ii >= h:
                    ii = h - 1
                for b in range(k):
                    jj = j - (b - m)
                    if jj < 0:
                        jj = 0
                    elif jj >= w:
                        jj = w - 1
                    acc += kern[a, b] * img[ii, jj]
            out[i, j] = acc
    return out


@nb.njit(**_JIT)
def conv2d_rep_adjoint(res, kern):
    h, w = res.shape
    k = kern.shape[0]
    m = k // 2
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            r = res[i, j]
            for a in range(k):
                ii = i - (a - m)
                if ii < 0:
                    ii = 0
                elif ii >= h:
                    ii = h - 1
                for b in range(k):
                    jj = j - (b - m)
                    if jj < 0:
                        jj = 0
                    elif jj >= w:
                        jj = w - 1
                    out[ii, jj] += kern[a, b] * r
    return out


@nb.njit(**_JIT)
def conv2d_kernel_grad(img, wres, k):
    h, w = img.shape
    m = k // 2
    gk = np.zeros((k, k), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            r = wres[i, j]
            if r == 0.0:
                continue
            for a in range(k):
                ii = i - (a - m)
                if ii < 0:
                    ii = 0
                elif ii >= h:
                    ii = h - 1
                for b in range(k):
                    jj = j - (b - m)
                    if jj < 0:
                        jj = 0
                    elif jj >= w:
                        jj = w - 1
                    gk[a, b] += r * img[ii, jj]
    return gk


@nb.njit(parallel=True, **_JIT)
def upsample_bilinear(small, h, w):
    hs, ws = small.shape
    ry = (hs - 1.0) / (h - 1.0) if h > 1 else 0.0
    rx = (ws - 1.0) / (w - 1.0) if w > 1 else 0.0
    out = np.empty((h, w), dtype=np.float64)
    for i in nb.prange(h):
        sy = i * ry
        y0 = int(np.floor(sy))
        fy = sy - y0
        y1 = y0 + 1 if y0 + 1 < hs else hs - 1
        for j in range(w):
            sx = j * rx
            x0 = int(np.floor(sx))
            fx = sx - x0
            x1 = x0 + 1 if x0 + 1 < ws else ws - 1
            out[i, j] = ((1.0 - fy) * (1.0 - fx) * small[y0, x0]
                         + (1.0 - fy) * fx * small[y0, x1]
                         + fy * (1.0 - fx) * small[y1, x0]
                         + fy * fx * small[y1, x1])
    return out


@nb.njit(**_JIT)
def upsample_bilinear_adjoint(res, hs, ws):
    h, w = res.shape
    ry = (hs - 1.0) / (h - 1.0) if h > 1 else 0.0
    rx = (ws - 1.0) / (w - 1.0) if w > 1 else 0.0
    out = np.zeros((hs, ws), dtype=np.float64)
    for i in range(h):
        sy = i * ry
        y0 = int(np.floor(sy))
        fy = sy - y0
        y1 = y0 + 1 if y0 + 1 < hs else hs - 1
        for j in range(w):
            sx = j * rx
            x0 = int(np.floor(sx))
            fx = sx - x0
            x1 = x0 + 1 if x0 + 1 < ws else ws - 1
            r = res[i, j]
            out[y0, x0] += (1.0 - fy) * (1.0 - fx) * r
            out[y0, x1] += (1.0 - fy) * fx * r
            out[y1, x0] += fy * (1.0 - fx) * r
            out[y1, x1] += fy * fx * r
    return out


@nb.njit(parallel=True, **_JIT)
def gauss_norm(pxx, pxy, pyy, rad):
    h, w = pxx.shape
    z = np.zeros((h, w), dtype=np.float64)
    for i in nb.prange(h):
        for j in range(w):
            acc = 0.0
            axx = pxx[i, j]
            axy = pxy[i, j]
            ayy = pyy[i, j]
            for dy in range(-rad, rad + 1):
                for dx in range(-rad, rad + 1):
                    acc += np.exp(-0.5 * (axx * dx * dx + 2.0 * axy * dx * dy
                                          + ayy * dy * dy))
            z[i, j] = acc
    return z


@nb.njit(parallel=True, **_JIT)
def sv_blur_gather(img, pxx, pxy, pyy, znorm, rad):
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.float64)
    for i in nb.prange(h):
        for j in range(w):
            acc = 0.0
            for dy in range(-rad, rad + 1):
                sy = i - dy
                if sy < 0:
                    sy = 0
                elif sy >= h:
                    sy = h - 1
                for dx in range(-rad, rad + 1):
                    sx = j - dx
                    if sx < 0:
                        sx = 0
                    elif sx >= w:
                        sx = w - 1
                    g = np.exp(-0.5 * (pxx[sy, sx] * dx * dx
                                       + 2.0 * pxy[sy, sx] * dx * dy
                                       + pyy[sy, sx] * dy * dy))
                    acc += img[sy, sx] * g / znorm[sy, sx]
            out[i, j] = acc
    return out
