"""Synthetic focal sweeps through a curved-mirror objective.

The generator implements a thin physically-motivated model, good enough
to exercise every stage of the pipeline end to end with known ground
truth:

* field curvature: a point at radius r (mm) from the optical axis has
  its sharp focus displaced axially by  sag = r^2 / (2 * petzval_radius),
  so a sensor at axial position z (um) sees defocus |z - sag(p)|;
* defocus maps to a Gaussian blur of sigma = |z - sag| / (2 * f_number)
  at the sensor, converted to pixels through the pixel pitch;
* mild coma elongates the blur radially by (1 + coma_coeff * r_norm) and
  astigmatism scales the tangential width by (1 + astig_coeff * r_norm^2);
* optional decentering shifts the optical axis off the frame center;
* each rendered slice gets a radial, z-dependent vignetting profile and
  seeded additive Gaussian noise.

Blur is applied as scatter physics (light from each source pixel spreads
by that source's PSF), evaluated in gather form so rendering is
deterministic under any thread count.  PSF parameters are computed on a
16x16 control grid and interpolated bilinearly between nodes.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._backend import kernels as _kn
from .imgio import FocalStack, validate_image

CONTROL_GRID = 16
SIGMA_FLOOR_PX = 0.1   # keeps the in-focus kernel a finite near-delta


@dataclass
class AberrationSpec:
    """Optical description of the synthetic objective.

    Defaults describe the stock 128x160 test rig: a 50 mm f/1-like
    mirror whose corner field sag (~440 um) spans a 3-slice sweep at
    200 um spacing.
    """
    focal_length_mm: float = 50.0
    f_number: float = 1.0
    petzval_radius_mm: float = 0.0   # 0 -> use focal_length_mm
    pixel_pitch_um: float = 65.0
    coma_coeff: float = 0.15
    astig_coeff: float = 0.10
    decenter_x_px: float = 2.5
    decenter_y_px: float = -1.5
    vignette_strength: float = 0.25
    noise_sigma: float = 0.005

    def __post_init__(self):
        if self.focal_length_mm <= 0 or self.f_number <= 0:
            raise ValueError("focal length and f-number must be positive")
        if self.pixel_pitch_um <= 0:
            raise ValueError("pixel pitch must be positive")
        if self.noise_sigma < 0 or self.vignette_strength < 0:
            raise ValueError("noise and vignetting must be nonnegative")

    @property
    def petzval_mm(self):
        return self.petzval_radius_mm if self.petzval_radius_mm else self.focal_length_mm

    def axis_center(self, shape):
        """Optical-axis position (x, y) in pixel coordinates."""
        h, w = shape
        return ((w - 1) / 2.0 + self.decenter_x_px,
                (h - 1) / 2.0 + self.decenter_y_px)


def field_sag(spec, y, x, shape):
    """Axial displacement (um) of best focus for field point(s) (y, x)."""
    ax, ay = spec.axis_center(shape)
    r_mm = np.hypot(np.asarray(x, dtype=np.float64) - ax,
                    np.asarray(y, dtype=np.float64) - ay) * spec.pixel_pitch_um * 1e-3
    if math.isinf(spec.petzval_mm):
        return np.zeros_like(r_mm)
    return r_mm * r_mm / (2.0 * spec.petzval_mm) * 1000.0


def _max_field_radius(spec, shape):
    h, w = shape
    ax, ay = spec.axis_center(shape)
    corners = [(0.0, 0.0), (0.0, w - 1.0), (h - 1.0, 0.0), (h - 1.0, w - 1.0)]
    return max(np.hypot(cx - ax, cy - ay) for cy, cx in corners)


def _covariance_at(spec, y, x, shape, sensor_z, r_max):
    """Blur covariance entries (cxx, cxy, cyy) in px^2 at field points."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    ax, ay = spec.axis_center(shape)
    dx = x - ax
    dy = y - ay
    r_px = np.hypot(dx, dy)
    sag = field_sag(spec, y, x, shape)
    sigma_d = np.abs(sensor_z - sag) / (2.0 * spec.f_number) / spec.pixel_pitch_um
    r_norm = r_px / r_max if r_max > 0 else np.zeros_like(r_px)
    sig_rad = np.maximum(sigma_d * (1.0 + spec.coma_coeff * r_norm), SIGMA_FLOOR_PX)
    sig_tan = np.maximum(sigma_d * (1.0 + spec.astig_coeff * r_norm ** 2), SIGMA_FLOOR_PX)
    safe_r = np.where(r_px > 1e-9, r_px, 1.0)
    ux = np.where(r_px > 1e-9, dx / safe_r, 1.0)
    uy = np.where(r_px > 1e-9, dy / safe_r, 0.0)
    vr = sig_rad ** 2
    vt = sig_tan ** 2
    cxx = vr * ux * ux + vt * uy * uy
    cxy = (vr - vt) * ux * uy
    cyy = vr * uy * uy + vt * ux * ux
    return cxx, cxy, cyy


def _control_grid_maps(spec, shape, sensor_z):
    """Covariance maps interpolated from the control grid to the frame."""
    h, w = shape
    gy = np.linspace(0.0, h - 1.0, CONTROL_GRID)
    gx = np.linspace(0.0, w - 1.0, CONTROL_GRID)
    yy, xx = np.meshgrid(gy, gx, indexing="ij")
    r_max = _max_field_radius(spec, shape)
    cxx, cxy, cyy = _covariance_at(spec, yy, xx, shape, sensor_z, r_max)
    return (_kn.upsample_bilinear(np.ascontiguousarray(cxx), h, w),
            _kn.upsample_bilinear(np.ascontiguousarray(cxy), h, w),
            _kn.upsample_bilinear(np.ascontiguousarray(cyy), h, w))


def _precision_maps(cxx, cxy, cyy):
    det = cxx * cyy - cxy * cxy
    det = np.maximum(det, 1e-12)
    return cyy / det, -cxy / det, cxx / det


def _sigma_max_map(cxx, cxy, cyy):
    tr = 0.5 * (cxx + cyy)
    disc = np.sqrt(np.maximum(0.25 * (cxx - cyy) ** 2 + cxy ** 2, 0.0))
    return np.sqrt(tr + disc)


def local_psf(spec, y, x, shape, sensor_z):
    """Explicit blur kernel at one field point.

    Returns (kernel, size): a normalized anisotropic Gaussian on the
    smallest odd support covering four standard deviations.
    """
    r_max = _max_field_radius(spec, shape)
    cxx, cxy, cyy = _covariance_at(spec, float(y), float(x), shape, sensor_z, r_max)
    sigma_max = float(_sigma_max_map(cxx, cxy, cyy))
    rad = max(1, int(math.ceil(4.0 * sigma_max)))
    size = 2 * rad + 1
    pxx, pxy, pyy = _precision_maps(np.array([[cxx]]), np.array([[cxy]]),
                                    np.array([[cyy]]))
    dx = np.arange(-rad, rad + 1, dtype=np.float64)
    gx, gy = np.meshgrid(dx, dx)
    kern = np.exp(-0.5 * (pxx[0, 0] * gx ** 2 + 2.0 * pxy[0, 0] * gx * gy
                          + pyy[0, 0] * gy ** 2))
    return kern / kern.sum(), size


def vignetting_frame(spec, z, shape):
    """Relative illumination map at sensor position z (um)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ax, ay = spec.axis_center(shape)
    r_max = _max_field_radius(spec, shape)
    r_norm = np.hypot(xx - ax, yy - ay) / max(r_max, 1e-9)
    v = 1.0 - spec.vignette_strength * r_norm ** 2 * (1.0 + z / 2000.0)
    return np.clip(v, 0.05, 1.0)


def offset_frame(shape, level=0.02):
    """Fixed-pattern sensor offset (dark level with a mild column ramp)."""
    h, w = shape
    ramp = np.linspace(0.0, 1.0, w)[None, :]
    return np.full((h, w), level) + 0.25 * level * ramp


def render_slice(truth, spec, sensor_z):
    """Blur-only rendering of one slice (no vignetting, no noise)."""
    truth = validate_image(truth, "truth")
    cxx, cxy, cyy = _control_grid_maps(spec, truth.shape, sensor_z)
    pxx, pxy, pyy = _precision_maps(cxx, cxy, cyy)
    rad = max(1, int(math.ceil(4.0 * float(_sigma_max_map(cxx, cxy, cyy).max()))))
    znorm = _kn.gauss_norm(pxx, pxy, pyy, rad)
    return _kn.sv_blur_gather(truth, pxx, pxy, pyy, znorm, rad)


def render_stack(truth, spec, z0, dz, n, seed=0):
    """Render an n-slice focal sweep of a ground-truth scene.

    Returns (stack, aux) where aux carries the per-slice per-pixel blur
    sigma maps and the spec, for inspection.  Slices include vignetting
    and seeded sensor noise as configured; the stack reports itself
    radiometrically corrected only when both are disabled.
    """
    truth = validate_image(truth, "truth")
    if n < 1:
        raise ValueError("need at least one slice")
    if dz <= 0 and n > 1:
        raise ValueError("slice spacing must be positive")
    h, w = truth.shape
    rng = np.random.default_rng(seed)
    slices = np.empty((n, h, w))
    sigma_maps = np.empty((n, h, w))
    for k in range(n):
        z = z0 + k * dz
        cxx, cxy, cyy = _control_grid_maps(spec, truth.shape, z)
        sigma_maps[k] = _sigma_max_map(cxx, cxy, cyy)
        pxx, pxy, pyy = _precision_maps(cxx, cxy, cyy)
        rad = max(1, int(math.ceil(4.0 * float(sigma_maps[k].max()))))
        znorm = _kn.gauss_norm(pxx, pxy, pyy, rad)
        clean = _kn.sv_blur_gather(truth, pxx, pxy, pyy, znorm, rad)
        frame = clean * vignetting_frame(spec, z, truth.shape)
        if spec.noise_sigma > 0:
            frame = frame + rng.normal(0.0, spec.noise_sigma, (h, w))
        slices[k] = frame
    # Noise does not make a stack radiometrically uncorrected; vignetting does.
    corrected = spec.vignette_strength == 0
    stack = FocalStack(slices, z0=z0, dz=dz, corrected=corrected)
    return stack, {"sigma_maps": sigma_maps, "spec": spec}


def make_scene(height, width, seed=0, kind="blobs"):
    """Deterministic synthetic test scene in [0, 1].

    ``blobs``: soft Gaussian blobs, a few rectangles and faint texture
    with a tapered border (keeps boundary effects mild).  ``bars``:
    horizontal frequency sweep, used for resolution sanity checks.
    ``textured``: blobs plus strong midband texture, closer to a natural
    photograph; defocus visibly costs signal here, which makes it the
    right content for judging restoration quality.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    if kind == "bars":
        freq = 0.02 + 0.4 * xx / max(width - 1, 1)
        scene = 0.5 + 0.45 * np.sin(2.0 * np.pi * freq * xx)
    elif kind == "textured":
        base = make_scene(height, width, seed=seed, kind="blobs")
        noise = np.random.default_rng(seed + 77).standard_normal(
            (height, width))
        band = ndimage.gaussian_filter(noise, 0.8) - \
            ndimage.gaussian_filter(noise, 2.5)
        band *= 0.12 / max(band.std(), 1e-12)
        return np.clip(base + band, 0.0, 1.0)
    elif kind == "blobs":
        scene = np.full((height, width), 0.28)
        n_blobs = 24
        for _ in range(n_blobs):
            cy = rng.uniform(0, height - 1)
            cx = rng.uniform(0, width - 1)
            sig = rng.uniform(0.02, 0.09) * max(height, width)
            amp = rng.uniform(-0.5, 0.75)
            scene += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig ** 2))
        for _ in range(4):
            y0 = int(rng.uniform(0, height * 0.8))
            x0 = int(rng.uniform(0, width * 0.8))
            hh = int(rng.uniform(4, height * 0.25))
            ww = int(rng.uniform(4, width * 0.25))
            scene[y0:y0 + hh, x0:x0 + ww] += rng.uniform(-0.3, 0.4)
        fy = rng.uniform(0.05, 0.15)
        fx = rng.uniform(0.05, 0.15)
        scene += 0.05 * np.sin(2 * np.pi * (fy * yy + fx * xx))
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    scene = np.clip(scene, 0.02, 0.98)
    margin = max(6, int(0.08 * min(height, width)))
    ramp_y = np.minimum(np.minimum(yy, height - 1 - yy) / margin, 1.0)
    ramp_x = np.minimum(np.minimum(xx, width - 1 - xx) / margin, 1.0)
    taper = 0.5 - 0.5 * np.cos(np.pi * np.minimum(ramp_y, ramp_x))
    return scene * taper + 0.02 * (1.0 - taper)
