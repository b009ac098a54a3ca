"""Monitor-based calibration of the blur operator.

A flat display shows known targets; the camera records one focal stack
per target.  Calibration then proceeds in stages:

1. radiometric: subtract the dark offset frame and divide out the
   (z-interpolated) vignetting profile;
2. geometric: detect dot targets, estimate the monitor-to-sensor
   homography, and resample targets into the sensor frame;
3. operator fit: minimize the mean squared prediction error of the
   mixture-of-warped-blurs model over all (target, slice) pairs with
   Adam, an L1 penalty on the kernels, and a feasibility projection on
   the warps after every step.

Calibration datasets live in a plain directory layout::

    DIR/meta.toml            z0 / dz / n / l scalars, vz array
    DIR/offset.pfm           optional dark frame
    DIR/vignetting/zNNNNN.pfm  optional, one map per entry of vz
    DIR/targets/NNN.pfm      displayed targets, sensor frame
    DIR/stacks/NNN/K.pfm     recorded slice K of stack NNN
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

try:
    import tomllib
except ModuleNotFoundError:          # python < 3.11
    import tomli as tomllib

from ._config import mapping_kwargs
from .imgio import FocalStack, read_pfm, validate_image, write_pfm
from .seidelconv import SeidelConvModel, param_gradients, project_warp

VIGNETTING_FLOOR = 1e-3
FOCUS_EPS = 1e-6


# --------------------------------------------------------------------------
# radiometric stage


@dataclass
class RadiometricCal:
    """Dark offset plus vignetting maps measured at a few sensor positions."""
    offset: np.ndarray           # (H, W)
    vign_z: np.ndarray           # (M,) sensor positions, um, ascending
    vign_maps: np.ndarray        # (M, H, W)

    def __post_init__(self):
        self.offset = validate_image(self.offset, "offset")
        self.vign_z = np.asarray(self.vign_z, dtype=np.float64).ravel()
        self.vign_maps = np.ascontiguousarray(self.vign_maps, dtype=np.float64)
        if self.vign_maps.ndim != 3 or self.vign_maps.shape[0] != self.vign_z.size:
            raise ValueError("need one vignetting map per z position")
        if self.vign_maps.shape[1:] != self.offset.shape:
            raise ValueError("vignetting maps must match the offset frame")
        if self.vign_z.size == 0:
            raise ValueError("need at least one vignetting map")
        if np.any(np.diff(self.vign_z) <= 0):
            raise ValueError("vignetting z positions must be ascending")

    def vignetting_at(self, z):
        """Vignetting map at sensor position z, linear between measurements."""
        zs = self.vign_z
        if z <= zs[0]:
            return self.vign_maps[0].copy()
        if z >= zs[-1]:
            return self.vign_maps[-1].copy()
        j = int(np.searchsorted(zs, z)) - 1
        t = (z - zs[j]) / (zs[j + 1] - zs[j])
        return (1.0 - t) * self.vign_maps[j] + t * self.vign_maps[j + 1]


def radiometric_correct(stack, cal):
    """Undo offset and vignetting; returns a stack flagged as corrected."""
    out = np.empty_like(stack.data)
    for k in range(stack.n_slices):
        v = np.maximum(cal.vignetting_at(stack.z(k)), VIGNETTING_FLOOR)
        out[k] = (stack.slice(k) - cal.offset) / v
    return FocalStack(out, z0=stack.z0, dz=stack.dz, corrected=True)


# --------------------------------------------------------------------------
# calibration targets


def generate_target(kind, height, width, seed=0, n_dots=None, spacing=16,
                    n_cycles=36, radius=None, margin=8, background=0.05,
                    foreground=0.95, center=None):
    """Monitor frames used during calibration.

    ``random_dots``   n_dots single bright pixels, uniform inside margins
    ``dot_grid``      bright pixels on a regular lattice
    ``sector_star``   binary Siemens star with n_cycles dark/bright pairs
    ``binary_random`` dense random binary pattern

    ``center`` (y, x) places the sector star away from the frame center,
    e.g. to probe resolution in an outer field region.
    """
    rng = np.random.default_rng(seed)
    img = np.full((height, width), background)
    if kind == "random_dots":
        if n_dots is None:
            n_dots = max(1, (height * width) // 300)
        ys = np.arange(margin, height - margin)
        xs = np.arange(margin, width - margin)
        if n_dots > ys.size * xs.size:
            raise ValueError("too many dots for the frame")
        flat = rng.choice(ys.size * xs.size, size=n_dots, replace=False)
        img[ys[flat // xs.size], xs[flat % xs.size]] = foreground
    elif kind == "dot_grid":
        img[margin:height - margin:spacing, margin:width - margin:spacing] = foreground
    elif kind == "sector_star":
        cy, cx = center if center is not None else \
            ((height - 1) / 2.0, (width - 1) / 2.0)
        if radius is None:
            radius = 0.45 * min(height, width)
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        theta = np.arctan2(yy - cy, xx - cx)
        r = np.hypot(yy - cy, xx - cx)
        star = np.where(np.sin(n_cycles * theta) >= 0.0, foreground, background)
        img = np.where(r <= radius, star, background)
        img[int(round(cy)), int(round(cx))] = foreground
    elif kind == "binary_random":
        img = np.where(rng.random((height, width)) < 0.5, foreground, background)
    else:
        raise ValueError(f"unknown target kind {kind!r}")
    return img


def detect_dots(img, threshold=None):
    """Intensity-weighted centroids of bright spots, as (y, x) rows."""
    img = validate_image(img)
    if threshold is None:
        threshold = 0.5 * (float(img.min()) + float(img.max()))
    mask = img > threshold
    labels, count = ndimage.label(mask)
    if count == 0:
        return np.zeros((0, 2))
    weights = np.where(mask, img - img.min(), 0.0)
    coms = ndimage.center_of_mass(weights, labels, np.arange(1, count + 1))
    pts = np.array(coms, dtype=np.float64)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    return pts[order]


# --------------------------------------------------------------------------
# geometric stage


@dataclass
class Homography:
    """Projective map acting on (x, y) points; matrix is 3x3, H[2,2] = 1."""
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("homography matrix must be 3x3")
        if abs(m[2, 2]) < 1e-12:
            raise ValueError("homography is not normalizable")
        self.matrix = m / m[2, 2]

    def apply(self, points_xy):
        p = np.atleast_2d(np.asarray(points_xy, dtype=np.float64))
        ones = np.ones((p.shape[0], 1))
        q = np.hstack([p, ones]) @ self.matrix.T
        return q[:, :2] / q[:, 2:3]

    def inverse(self):
        return Homography(np.linalg.inv(self.matrix))

    @classmethod
    def identity(cls):
        return cls(np.eye(3))


def _normalizer(pts):
    mean = pts.mean(axis=0)
    dist = np.sqrt(((pts - mean) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / max(dist, 1e-12)
    return np.array([[s, 0.0, -s * mean[0]],
                     [0.0, s, -s * mean[1]],
                     [0.0, 0.0, 1.0]])


def estimate_homography(src_xy, dst_xy):
    """DLT with Hartley normalization.

    Returns (homography, error): the homography maps src -> dst and the
    error is the mean symmetric transfer distance in pixels.
    """
    src = np.asarray(src_xy, dtype=np.float64)
    dst = np.asarray(dst_xy, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError("point arrays must both be (N, 2)")
    if src.shape[0] < 4:
        raise ValueError("need at least 4 correspondences")
    t_src = _normalizer(src)
    t_dst = _normalizer(dst)
    sn = Homography(t_src).apply(src)
    dn = Homography(t_dst).apply(dst)
    rows = []
    for (x, y), (u, v) in zip(sn, dn):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    hn = vt[-1].reshape(3, 3)
    hom = Homography(np.linalg.inv(t_dst) @ hn @ t_src)
    fwd = np.sqrt(((hom.apply(src) - dst) ** 2).sum(axis=1)).mean()
    bwd = np.sqrt(((hom.inverse().apply(dst) - src) ** 2).sum(axis=1)).mean()
    return hom, 0.5 * (fwd + bwd)


def resample_homography(img, hom, out_shape=None):
    """Pull-resample: out(p) = img(hom(p)), bilinear, replicate boundary.

    ``hom`` maps output pixel coordinates to input coordinates.
    """
    img = validate_image(img)
    h, w = out_shape if out_shape is not None else img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    src = hom.apply(pts)
    coords = np.stack([src[:, 1].reshape(h, w), src[:, 0].reshape(h, w)])
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


# --------------------------------------------------------------------------
# focus analysis


def focus_measure(img, window=7):
    """Local contrast (std / mean) over a square window."""
    img = validate_image(img)
    m = ndimage.uniform_filter(img, window, mode="nearest")
    m2 = ndimage.uniform_filter(img * img, window, mode="nearest")
    std = np.sqrt(np.maximum(m2 - m * m, 0.0))
    return std / (np.abs(m) + FOCUS_EPS)


def best_focus(stack, window=7):
    """Per-pixel best-focus surface.

    Returns (k_map, scores); ties go to the smaller slice index, i.e.
    the smaller sensor position.
    """
    scores = np.stack([focus_measure(stack.slice(k), window)
                       for k in range(stack.n_slices)])
    return np.argmax(scores, axis=0), scores


def best_focus_slice(stack, window=7):
    """Index of the slice sharpest over the central quarter-area region."""
    _, scores = best_focus(stack, window)
    n, h, w = scores.shape
    y0 = (h - h // 2) // 2
    x0 = (w - w // 2) // 2
    central = scores[:, y0:y0 + h // 2, x0:x0 + w // 2].reshape(n, -1).mean(axis=1)
    return int(np.argmax(central))


# --------------------------------------------------------------------------
# operator fit


@dataclass
class CalibConfig:
    n_components: int = 31
    kernel_size: int = 11
    epochs: int = 500
    batch_size: int = 4
    lr: float = 5e-3
    lambda_kern: float = 1e-4
    freeze_warps: bool = False       # keep warps at exact identity
    tie_warps: bool = False          # share warp parameters across slices
    nonneg_weights: bool = True
    # Mixture weights live on a coarse grid (bilinearly upsampled).  Smooth
    # gating fields are what make the fit generalize beyond the calibration
    # frames: with per-pixel weights (downsample 1) and only a handful of
    # targets, every pixel has as many free weights as observations and the
    # fit interpolates the training stacks instead of learning the optics.
    weight_downsample: int = 8
    init_jitter: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_components < 1 or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("need >= 1 components and an odd kernel size")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.weight_downsample < 1:
            raise ValueError("weight_downsample must be >= 1")

    @classmethod
    def from_mapping(cls, mapping):
        """Build from a {key: value} mapping, rejecting unknown keys."""
        return cls(**mapping_kwargs(cls, mapping, "calibration option"))


def _init_model(config, n_slices, height, width, rng):
    q = config.n_components
    k = config.kernel_size
    mats = np.tile(np.eye(2), (n_slices, q, 1, 1))
    offs = np.zeros((n_slices, q, 2))
    if not config.freeze_warps:
        mats += config.init_jitter * rng.standard_normal(mats.shape)
        offs += 0.5 * rng.standard_normal(offs.shape)
    kerns = 1e-3 * rng.random((n_slices, q, k, k))
    kerns[:, :, k // 2, k // 2] += 1.0
    ds = config.weight_downsample
    hs = max(2, -(-height // ds)) if ds > 1 else height
    ws = max(2, -(-width // ds)) if ds > 1 else width
    weights = np.full((n_slices, q, hs, ws), 1.0 / q)
    return SeidelConvModel(warp_mats=mats, warp_offsets=offs, kernels=kerns,
                           weights=weights, height=height, width=width,
                           weight_downsample=ds)


class _Adam:
    def __init__(self, shapes, lr):
        self.lr = lr
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1 ** self.t)
            vh = self.v[i] / (1 - self.b2 ** self.t)
            out.append(p - self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


def fit_model(targets, stacks, config=None, callback=None):
    """Fit the blur operator to (displayed target, recorded stack) pairs.

    ``targets`` are the known monitor frames already resampled into the
    sensor frame; ``stacks`` the matching radiometrically corrected
    recordings.  Returns (model, history) with per-epoch loss traces.
    """
    config = config or CalibConfig()
    if len(targets) == 0 or len(targets) != len(stacks):
        raise ValueError("need one recorded stack per target")
    targets = [validate_image(t, "target") for t in targets]
    h, w = targets[0].shape
    n = stacks[0].n_slices
    for t in targets:
        if t.shape != (h, w):
            raise ValueError("all targets must share one shape")
    for s in stacks:
        if (s.shape != (h, w) or s.n_slices != n
                or s.z0 != stacks[0].z0 or s.dz != stacks[0].dz):
            raise ValueError("all stacks must share shape and z sampling")
        if not s.corrected:
            raise ValueError("stacks must be radiometrically corrected "
                             "before fitting (see radiometric_correct)")

    rng = np.random.default_rng(config.seed)
    model = _init_model(config, n, h, w, rng)
    lam = config.lambda_kern

    # parameter list: [mats, offs, kerns, weights]; tied warps keep a
    # single (Q, ...) copy that is broadcast into the model every step.
    tied = config.tie_warps
    mats = model.warp_mats[0].copy() if tied else model.warp_mats
    offs = model.warp_offsets[0].copy() if tied else model.warp_offsets
    if tied:
        model.warp_mats[:] = mats[None]
        model.warp_offsets[:] = offs[None]
    params = [mats, offs, model.kernels, model.weights]
    opt = _Adam([p.shape for p in params], config.lr)

    n_samples = len(targets)
    batch = min(config.batch_size, n_samples)
    history = {"loss": [], "data": []}
    for epoch in range(config.epochs):
        order = rng.permutation(n_samples)
        epoch_data = 0.0
        for start in range(0, n_samples, batch):
            idx = order[start:start + batch]
            g = [np.zeros_like(p) for p in params]
            batch_loss = 0.0
            for b in idx:
                x = targets[b]
                for k in range(n):
                    res = model.forward(x, k) - stacks[b].slice(k)
                    batch_loss += 0.5 * float((res * res).sum())
                    pg = param_gradients(model, x, res, k)
                    if tied:
                        g[0] += pg.warp_mats
                        g[1] += pg.warp_offsets
                    else:
                        g[0][k] += pg.warp_mats
                        g[1][k] += pg.warp_offsets
                    g[2][k] += pg.kernels
                    g[3][k] += pg.weights
            scale = 1.0 / idx.size
            g = [gi * scale for gi in g]
            if lam > 0:
                g[2] += lam * np.sign(params[2])
            if config.freeze_warps:
                g[0][:] = 0.0
                g[1][:] = 0.0
            new = opt.step(params, g)
            for p, pn in zip(params, new):
                p[:] = pn
            if config.freeze_warps:
                mats_view = mats if tied else mats.reshape(-1, 2, 2)
                offs_view = offs if tied else offs.reshape(-1, 2)
                mats_view[:] = np.eye(2)
                offs_view[:] = 0.0
            else:
                m_flat = mats.reshape(-1, 2, 2)
                o_flat = offs.reshape(-1, 2)
                for i in range(m_flat.shape[0]):
                    m_flat[i], o_flat[i] = project_warp(m_flat[i], o_flat[i])
            if tied:
                model.warp_mats[:] = mats[None]
                model.warp_offsets[:] = offs[None]
            if config.nonneg_weights:
                np.maximum(model.weights, 0.0, out=model.weights)
            epoch_data += batch_loss / idx.size
        n_batches = -(-n_samples // batch)
        data_term = epoch_data / n_batches
        loss = data_term + lam * float(np.abs(model.kernels).sum())
        history["data"].append(data_term)
        history["loss"].append(loss)
        if callback is not None:
            callback(epoch, model, loss)
    return model, history


# --------------------------------------------------------------------------
# dataset directory layout


def _format_toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_format_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot store {type(v).__name__} in dataset metadata")


def write_dataset(path, targets, stacks, offset=None, cal_vign_z=None,
                  cal_vign_maps=None, extra_meta=None):
    """Write a calibration (or evaluation) dataset directory."""
    path = Path(path)
    if len(targets) != len(stacks) or not targets:
        raise ValueError("need one stack per target")
    if (cal_vign_z is None) != (cal_vign_maps is None):
        raise ValueError("vignetting maps and z positions come together")
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "z0": float(stacks[0].z0),
        "dz": float(stacks[0].dz),
        "n": int(stacks[0].n_slices),
        "l": len(targets),
    }
    if cal_vign_z is not None:
        meta["vz"] = [float(z) for z in cal_vign_z]
    if extra_meta:
        meta.update(extra_meta)
    lines = [f"{key} = {_format_toml_value(val)}" for key, val in meta.items()]
    (path / "meta.toml").write_text("\n".join(lines) + "\n")
    if offset is not None:
        write_pfm(offset, path / "offset.pfm")
    if cal_vign_z is not None:
        vdir = path / "vignetting"
        vdir.mkdir(exist_ok=True)
        names = [f"z{int(round(z)):05d}.pfm" for z in cal_vign_z]
        if len(set(names)) != len(names):
            raise ValueError("vignetting z positions collide after rounding")
        for name, vmap in zip(names, cal_vign_maps):
            write_pfm(vmap, vdir / name)
    tdir = path / "targets"
    tdir.mkdir(exist_ok=True)
    for i, t in enumerate(targets):
        write_pfm(t, tdir / f"{i:03d}.pfm")
    for i, s in enumerate(stacks):
        sdir = path / "stacks" / f"{i:03d}"
        sdir.mkdir(parents=True, exist_ok=True)
        for k in range(s.n_slices):
            write_pfm(s.slice(k), sdir / f"{k}.pfm")


def read_dataset(path):
    """Read a dataset directory written by :func:`write_dataset`.

    Returns a dict with targets, stacks, cal (None without radiometric
    files) and the raw metadata.  Stacks are flagged corrected only when
    the directory carries no radiometric calibration data.
    """
    path = Path(path)
    meta_file = path / "meta.toml"
    if not meta_file.is_file():
        raise FileNotFoundError(f"no dataset at {path} (missing meta.toml)")
    with open(meta_file, "rb") as fh:
        meta = tomllib.load(fh)
    for key in ("z0", "dz", "n", "l"):
        if key not in meta:
            raise ValueError(f"dataset metadata misses required key {key!r}")
    n = int(meta["n"])
    count = int(meta["l"])

    offset_file = path / "offset.pfm"
    offset = read_pfm(offset_file) if offset_file.is_file() else None
    cal = None
    if "vz" in meta:
        if offset is None:
            raise ValueError("vignetting maps without an offset frame")
        vz = [float(z) for z in meta["vz"]]
        maps = [read_pfm(path / "vignetting" / f"z{int(round(z)):05d}.pfm")
                for z in vz]
        cal = RadiometricCal(offset=offset, vign_z=np.array(vz),
                             vign_maps=np.stack(maps))
    elif offset is not None:
        zeros = np.ones((1,) + offset.shape)
        cal = RadiometricCal(offset=offset, vign_z=np.array([0.0]),
                             vign_maps=zeros)

    targets = [read_pfm(path / "targets" / f"{i:03d}.pfm") for i in range(count)]
    corrected = cal is None
    stacks = []
    for i in range(count):
        frames = [read_pfm(path / "stacks" / f"{i:03d}" / f"{k}.pfm")
                  for k in range(n)]
        stacks.append(FocalStack(np.stack(frames), z0=float(meta["z0"]),
                                 dz=float(meta["dz"]), corrected=corrected))
    return {"targets": targets, "stacks": stacks, "cal": cal, "meta": meta}
