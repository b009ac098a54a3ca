"""Reconstruction quality metrics and the evaluation report format.

PSNR is capped at 99 dB so perfect reconstructions stay printable and
comparable.  SSIM follows the standard Gaussian-window formulation
(11x11, sigma 1.5) and averages only over windows that fit completely
inside the frame -- and inside the evaluation mask when one is given.

Resolution is measured on Siemens-star images: contrast along rings of
decreasing radius maps out modulation versus spatial frequency, and the
highest frequency still reaching 30% contrast is reported (``mtf30``).
"""

import math

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _check_pair(img, ref):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape or img.ndim != 2:
        raise ValueError(f"need two images of one shape, got {img.shape} "
                         f"and {ref.shape}")
    return img, ref


def psnr(img, ref, mask=None, peak=1.0):
    """Peak signal-to-noise ratio in dB, capped at 99."""
    img, ref = _check_pair(img, ref)
    diff = img - ref
    if mask is not None:
        diff = diff[mask]
        if diff.size == 0:
            raise ValueError("empty evaluation mask")
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP)


def _ssim_window():
    half = SSIM_WINDOW // 2
    g = np.exp(-np.arange(-half, half + 1) ** 2 / (2.0 * SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(img, ref, mask=None, peak=1.0):
    """Mean SSIM over all windows fully inside the frame (and mask)."""
    img, ref = _check_pair(img, ref)
    h, w = img.shape
    half = SSIM_WINDOW // 2
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} px wide")
    win = _ssim_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def smooth(a):
        return ndimage.correlate(a, win, mode="nearest")

    mu1 = smooth(img)
    mu2 = smooth(ref)
    v1 = smooth(img * img) - mu1 * mu1
    v2 = smooth(ref * ref) - mu2 * mu2
    cov = smooth(img * ref) - mu1 * mu2
    ssim_map = (((2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2))
                / ((mu1 * mu1 + mu2 * mu2 + c1) * (v1 + v2 + c2)))
    valid = np.zeros((h, w), dtype=bool)
    valid[half:h - half, half:w - half] = True
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h, w):
            raise ValueError("mask shape must match the images")
        valid &= ndimage.binary_erosion(
            mask, structure=np.ones((SSIM_WINDOW, SSIM_WINDOW)),
            border_value=0)
    if not valid.any():
        raise ValueError("no full SSIM window fits the evaluation mask")
    return float(ssim_map[valid].mean())


def region_split(shape):
    """(on_axis, off_axis) masks: the centered half-size box and the rest."""
    h, w = shape
    bh, bw = h // 2, w // 2
    y0 = (h - bh) // 2
    x0 = (w - bw) // 2
    on = np.zeros((h, w), dtype=bool)
    on[y0:y0 + bh, x0:x0 + bw] = True
    return on, ~on


def evaluate_frame(img, ref):
    """The standard report entries for one reconstruction."""
    on, off = region_split(np.asarray(ref).shape)
    return {
        "psnr_full": psnr(img, ref),
        "psnr_on_axis": psnr(img, ref, mask=on),
        "psnr_off_axis": psnr(img, ref, mask=off),
        "ssim_full": ssim(img, ref),
    }


# --------------------------------------------------------------------------
# star-target resolution


def ring_contrast(img, center, radius, n_cycles):
    """Michelson contrast of the star pattern along one ring.

    Samples the ring densely (bilinear), then takes robust extremes
    (95th / 5th percentile) so single-pixel outliers do not dominate.
    """
    cy, cx = center
    m = 4 * n_cycles * max(int(math.ceil(radius)), 1)
    theta = np.linspace(0.0, 2.0 * np.pi, m, endpoint=False)
    ys = cy + radius * np.sin(theta)
    xs = cx + radius * np.cos(theta)
    vals = ndimage.map_coordinates(np.asarray(img, dtype=np.float64),
                                   [ys, xs], order=1, mode="nearest")
    i_max = float(np.percentile(vals, 95))
    i_min = float(np.percentile(vals, 5))
    denom = i_max + i_min
    if denom <= 0:
        return 0.0
    return max((i_max - i_min) / denom, 0.0)


def star_frequency(radius, n_cycles):
    """Spatial frequency (cycles/px) of an n_cycles star at this radius."""
    return n_cycles / (2.0 * np.pi * radius)


def star_mtf(img, center, n_cycles, r_min=4.0, r_max=None):
    """(freqs, contrasts) sampled on 1-px ring steps, frequency ascending."""
    img = np.asarray(img, dtype=np.float64)
    if r_max is None:
        h, w = img.shape
        cy, cx = center
        r_max = min(cy, cx, h - 1 - cy, w - 1 - cx)
    radii = np.arange(float(r_max), float(r_min) - 0.5, -1.0)
    if radii.size == 0:
        raise ValueError("no rings between r_min and r_max")
    freqs = np.array([star_frequency(r, n_cycles) for r in radii])
    contrasts = np.array([ring_contrast(img, center, r, n_cycles)
                          for r in radii])
    return freqs, contrasts


def mtf30(freqs, contrasts, threshold=0.3):
    """Highest frequency whose contrast still reaches the threshold.

    Returns (frequency, attained).  attained=False (with frequency 0)
    means contrast never reached the threshold; when the very highest
    sampled frequency is still above it, that frequency is returned.
    """
    freqs = np.asarray(freqs, dtype=np.float64)
    contrasts = np.asarray(contrasts, dtype=np.float64)
    if freqs.shape != contrasts.shape or freqs.ndim != 1 or freqs.size == 0:
        raise ValueError("freqs and contrasts must be matching 1-D arrays")
    if np.any(np.diff(freqs) <= 0):
        raise ValueError("frequencies must be ascending")
    above = np.nonzero(contrasts >= threshold)[0]
    if above.size == 0:
        return 0.0, False
    i = int(above[-1])
    if i == freqs.size - 1:
        return float(freqs[i]), True
    c0, c1 = contrasts[i], contrasts[i + 1]
    t = (c0 - threshold) / (c0 - c1)
    return float(freqs[i] + t * (freqs[i + 1] - freqs[i])), True


def star_mtf30(img, center, n_cycles, r_min=4.0, r_max=None, threshold=0.3):
    freqs, contrasts = star_mtf(img, center, n_cycles, r_min, r_max)
    return mtf30(freqs, contrasts, threshold)


# --------------------------------------------------------------------------
# plain-text reporting


def format_table(results, columns=None):
    """Fixed-width comparison table: one row per method.

    ``results`` maps method name -> {metric: value}; column order follows
    the first entry unless given explicitly.
    """
    if not results:
        raise ValueError("nothing to report")
    if columns is None:
        columns = list(next(iter(results.values())).keys())
    name_w = max(len("method"), max(len(k) for k in results))
    cells = {m: {c: f"{v[c]:.3f}" if isinstance(v[c], float) else str(v[c])
                 for c in columns} for m, v in results.items()}
    col_w = {c: max(len(c), max(len(cells[m][c]) for m in results))
             for c in columns}
    lines = ["  ".join(["method".ljust(name_w)]
                       + [c.rjust(col_w[c]) for c in columns])]
    lines.append("  ".join(["-" * name_w] + ["-" * col_w[c] for c in columns]))
    for m in results:
        lines.append("  ".join([m.ljust(name_w)]
                               + [cells[m][c].rjust(col_w[c]) for c in columns]))
    return "\n".join(lines)
