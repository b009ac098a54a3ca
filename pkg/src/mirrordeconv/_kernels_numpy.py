"""Pure-numpy implementations of the hot array kernels.

This module is the reference semantics for the accelerated versions in
``_kernels_numba``; the two expose identical signatures and are selected
at import time by ``MIRRORDECONV_BACKEND`` (see ``_backend``).  Everything
here works on float64 arrays, uses replicate (clamp-to-edge) boundary
handling, and keeps reduction order fixed so repeated runs are
bit-reproducible.

Coordinate conventions, used everywhere in the package:

* a pixel (row i, col j) sits at continuous position x = j, y = i;
* affine sample position for output pixel p is  s = M (p - c) + off + c,
  where c = ((W-1)/2, (H-1)/2) is the image center and off is in pixels;
* sampling is bilinear with coordinates clamped to the frame, which is
  exactly interpolation into the replicate-extended image.

Integer-coordinate samples bypass the bilinear blend so that identity
warps are lossless, bit for bit.
"""

import numpy as np


def _sample_coords(shape, mat, off):
    h, w = shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xr = xx - cx
    yr = yy - cy
    sx = mat[0, 0] * xr + mat[0, 1] * yr + off[0] + cx
    sy = mat[1, 0] * xr + mat[1, 1] * yr + off[1] + cy
    return sx, sy


def _corner_indexing(sx, sy, h, w):
    sxc = np.clip(sx, 0.0, w - 1.0)
    syc = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sxc)
    y0 = np.floor(syc)
    fx = sxc - x0
    fy = syc - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, x1, y0, y1, fx, fy


def warp_bilinear(img, mat, off):
    """Affine warp by bilinear gather; out(p) = img(M(p-c)+off+c)."""
    h, w = img.shape
    sx, sy = _sample_coords(img.shape, mat, off)
    x0, x1, y0, y1, fx, fy = _corner_indexing(sx, sy, h, w)
    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    out = ((1.0 - fx) * (1.0 - fy) * v00 + fx * (1.0 - fy) * v01
           + (1.0 - fx) * fy * v10 + fx * fy * v11)
    exact = (fx == 0.0) & (fy == 0.0)
    if exact.any():
        out[exact] = v00[exact]
    return out


def warp_bilinear_adjoint(res, mat, off):
    """Exact transpose of warp_bilinear: scatter with the same weights."""
    h, w = res.shape
    sx, sy = _sample_coords(res.shape, mat, off)
    x0, x1, y0, y1, fx, fy = _corner_indexing(sx, sy, h, w)
    out = np.zeros((h, w), dtype=np.float64)
    r = res.ravel()
    flat = out.ravel()
    idx00 = (y0 * w + x0).ravel()
    idx01 = (y0 * w + x1).ravel()
    idx10 = (y1 * w + x0).ravel()
    idx11 = (y1 * w + x1).ravel()
    fx = fx.ravel()
    fy = fy.ravel()
    np.add.at(flat, idx00, (1.0 - fx) * (1.0 - fy) * r)
    np.add.at(flat, idx01, fx * (1.0 - fy) * r)
    np.add.at(flat, idx10, (1.0 - fx) * fy * r)
    np.add.at(flat, idx11, fx * fy * r)
    return out


def warp_affine_grad(img, mat, off, upstream):
    """Gradient of sum(upstream * warp_bilinear(img)) wrt mat and off.

    Samples clamped at the frame edge have zero spatial derivative (the
    clamp is flat there), matching what finite differences of the warp
    see for perturbations that stay outside the frame.
    """
    h, w = img.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    sx, sy = _sample_coords(img.shape, mat, off)
    in_x = (sx > 0.0) & (sx < w - 1.0)
    in_y = (sy > 0.0) & (sy < h - 1.0)
    x0, x1, y0, y1, fx, fy = _corner_indexing(sx, sy, h, w)
    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    dfdx = ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10)) * in_x
    dfdy = ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01)) * in_y
    gx = upstream * dfdx
    gy = upstream * dfdy
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xr = xx - cx
    yr = yy - cy
    gmat = np.empty((2, 2), dtype=np.float64)
    goff = np.empty(2, dtype=np.float64)
    gmat[0, 0] = np.sum(gx * xr)
    gmat[0, 1] = np.sum(gx * yr)
    gmat[1, 0] = np.sum(gy * xr)
    gmat[1, 1] = np.sum(gy * yr)
    goff[0] = np.sum(gx)
    goff[1] = np.sum(gy)
    return gmat, goff


def conv2d_rep(img, kern):
    """True 2-D convolution with replicate padding, same-size output."""
    h, w = img.shape
    k = kern.shape[0]
    m = k // 2
    if m == 0:
        return kern[0, 0] * img
    pad = np.pad(img, m, mode="edge")
    out = np.zeros((h, w), dtype=np.float64)
    for a in range(k):
        for b in range(k):
            out += kern[a, b] * pad[2 * m - a:2 * m - a + h,
                                    2 * m - b:2 * m - b + w]
    return out


def conv2d_rep_adjoint(res, kern):
    """Exact transpose of conv2d_rep.

    Correlation into the padded domain followed by folding the pad
    margins back onto the edge rows/cols (the transpose of replicate
    padding).
    """
    h, w = res.shape
    k = kern.shape[0]
    m = k // 2
    if m == 0:
        return kern[0, 0] * res
    z = np.zeros((h + 2 * m, w + 2 * m), dtype=np.float64)
    for a in range(k):
        for b in range(k):
            z[2 * m - a:2 * m - a + h, 2 * m - b:2 * m - b + w] += kern[a, b] * res
    rows = z[m:m + h, :].copy()
    rows[0, :] += z[:m, :].sum(axis=0)
    rows[h - 1, :] += z[m + h:, :].sum(axis=0)
    out = rows[:, m:m + w].copy()
    out[:, 0] += rows[:, :m].sum(axis=1)
    out[:, w - 1] += rows[:, m + w:].sum(axis=1)
    return out


def conv2d_kernel_grad(img, wres, k):
    """Gradient of sum(wres * conv2d_rep(img, kern)) wrt the kernel."""
    h, w = img.shape
    m = k // 2
    pad = np.pad(img, m, mode="edge") if m else img
    gk = np.empty((k, k), dtype=np.float64)
    for a in range(k):
        for b in range(k):
            gk[a, b] = np.sum(wres * pad[2 * m - a:2 * m - a + h,
                                         2 * m - b:2 * m - b + w])
    return gk


def upsample_bilinear(small, h, w):
    """Bilinear upsample with corner alignment (used by weight maps)."""
    hs, ws = small.shape
    sy = np.linspace(0.0, hs - 1.0, h) if hs > 1 else np.zeros(h)
    sx = np.linspace(0.0, ws - 1.0, w) if ws > 1 else np.zeros(w)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, hs - 1)
    x1 = np.minimum(x0 + 1, ws - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    v00 = small[np.ix_(y0, x0)]
    v01 = small[np.ix_(y0, x1)]
    v10 = small[np.ix_(y1, x0)]
    v11 = small[np.ix_(y1, x1)]
    return ((1.0 - fy) * (1.0 - fx) * v00 + (1.0 - fy) * fx * v01
            + fy * (1.0 - fx) * v10 + fy * fx * v11)


def upsample_bilinear_adjoint(res, hs, ws):
    h, w = res.shape
    sy = np.linspace(0.0, hs - 1.0, h) if hs > 1 else np.zeros(h)
    sx = np.linspace(0.0, ws - 1.0, w) if ws > 1 else np.zeros(w)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, hs - 1)
    x1 = np.minimum(x0 + 1, ws - 1)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros((hs, ws), dtype=np.float64)
    wy0 = (1.0 - fy)[:, None]
    wy1 = fy[:, None]
    wx0 = (1.0 - fx)[None, :]
    wx1 = fx[None, :]
    iy0 = np.broadcast_to(y0[:, None], (h, w)).ravel()
    iy1 = np.broadcast_to(y1[:, None], (h, w)).ravel()
    ix0 = np.broadcast_to(x0[None, :], (h, w)).ravel()
    ix1 = np.broadcast_to(x1[None, :], (h, w)).ravel()
    flat = out.ravel()
    np.add.at(flat, iy0 * ws + ix0, (wy0 * wx0 * res).ravel())
    np.add.at(flat, iy0 * ws + ix1, (wy0 * wx1 * res).ravel())
    np.add.at(flat, iy1 * ws + ix0, (wy1 * wx0 * res).ravel())
    np.add.at(flat, iy1 * ws + ix1, (wy1 * wx1 * res).ravel())
    return out


def gauss_norm(pxx, pxy, pyy, rad):
    """Normalization map for truncated anisotropic Gaussians.

    pxx/pxy/pyy are per-pixel inverse-covariance entries; the kernel of
    the source at s is exp(-0.5 d^T P(s) d) over |d| <= rad.
    """
    h, w = pxx.shape
    z = np.zeros((h, w), dtype=np.float64)
    for dy in range(-rad, rad + 1):
        for dx in range(-rad, rad + 1):
            z += np.exp(-0.5 * (pxx * (dx * dx) + 2.0 * pxy * (dx * dy)
                                + pyy * (dy * dy)))
    return z


def sv_blur_gather(img, pxx, pxy, pyy, znorm, rad):
    """Spatially varying Gaussian blur, scatter physics in gather form.

    out(p) = sum_d img(s) * g_s(d) / Z(s) with s = p - d; sources outside
    the frame replicate the edge pixel (both value and kernel).
    """
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w), dtype=np.float64)
    for dy in range(-rad, rad + 1):
        sy = np.clip(yy - dy, 0, h - 1)
        for dx in range(-rad, rad + 1):
            sx = np.clip(xx - dx, 0, w - 1)
            g = np.exp(-0.5 * (pxx[sy, sx] * (dx * dx)
                               + 2.0 * pxy[sy, sx] * (dx * dy)
                               + pyy[sy, sx] * (dy * dy)))
            out += img[sy, sx] * g / znorm[sy, sx]
    return out
