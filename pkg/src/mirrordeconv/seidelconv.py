"""Spatially varying blur as a mixture of warped, blurred components.

A model holds, for every captured slice k and component q, an affine
warp (2x2 matrix plus pixel offset, both relative to the image center),
a small convolution kernel, and a per-pixel weight map.  One slice's
forward operator is

    forward(img, k) = sum_q  w_kq  *  conv( warp(img, M_kq, t_kq), h_kq )

with bilinear warping and replicate borders throughout.  The adjoint
runs the exact transposes in reverse, so <A x, y> == <x, A^T y> holds to
rounding error; tests enforce this to 1e-8 of the norm product.

Kernels are spatially invariant within a component: the weight maps do
the field mixing.  Weight maps may be stored at reduced resolution
(``weight_downsample``) and are upsampled bilinearly on the fly.
"""

from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels as _kn
from .imgio import validate_image

DEFAULT_BOUND_DET = 0.25
DEFAULT_BOUND_OFFSET = 15.0


@dataclass
class AffineWarp:
    """Center-relative affine map p -> mat @ (p - c) + offset + c."""
    mat: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        self.mat = np.ascontiguousarray(self.mat, dtype=np.float64).reshape(2, 2)
        self.offset = np.ascontiguousarray(self.offset, dtype=np.float64).reshape(2)

    @classmethod
    def identity(cls):
        return cls(np.eye(2), np.zeros(2))


def warp(img, aff):
    """Resample img under an AffineWarp (bilinear, replicate borders)."""
    img = validate_image(img)
    return _kn.warp_bilinear(img, aff.mat, aff.offset)


def warp_adjoint(res, aff):
    res = validate_image(res, "residual")
    return _kn.warp_bilinear_adjoint(res, aff.mat, aff.offset)


def project_warp(mat, offset, bound_det=DEFAULT_BOUND_DET,
                 bound_offset=DEFAULT_BOUND_OFFSET):
    """Project an affine warp back into the trust region.

    Keeps |det(mat) - 1| <= bound_det by isotropic rescaling and caps the
    offset norm at bound_offset pixels.  Degenerate matrices (det <= 0)
    are pulled toward the identity until rescaling makes sense again.
    """
    mat = np.array(mat, dtype=np.float64).reshape(2, 2)
    offset = np.array(offset, dtype=np.float64).reshape(2)
    eye = np.eye(2)
    d = float(np.linalg.det(mat))
    guard = 0
    while d < 1e-6 and guard < 60:
        mat = 0.5 * (mat + eye)
        d = float(np.linalg.det(mat))
        guard += 1
    if d > 1.0 + bound_det:
        mat = mat * np.sqrt((1.0 + bound_det) / d)
    elif d < 1.0 - bound_det:
        mat = mat * np.sqrt((1.0 - bound_det) / d)
    norm = float(np.hypot(offset[0], offset[1]))
    if norm > bound_offset:
        offset = offset * (bound_offset / norm)
    return mat, offset


@dataclass
class SeidelConvModel:
    """Per-slice mixtures of warped+blurred components.

    warp_mats    : (N, Q, 2, 2)
    warp_offsets : (N, Q, 2)
    kernels      : (N, Q, K, K), K odd
    weights      : (N, Q, Hs, Ws) with (Hs, Ws) the stored weight grid;
                   equal to (H, W) unless weight_downsample > 1
    """
    warp_mats: np.ndarray
    warp_offsets: np.ndarray
    kernels: np.ndarray
    weights: np.ndarray
    height: int
    width: int
    weight_downsample: int = 1
    interpolation: str = field(default="bilinear")
    boundary: str = field(default="replicate")

    def __post_init__(self):
        self.warp_mats = np.ascontiguousarray(self.warp_mats, dtype=np.float64)
        self.warp_offsets = np.ascontiguousarray(self.warp_offsets, dtype=np.float64)
        self.kernels = np.ascontiguousarray(self.kernels, dtype=np.float64)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        n, q = self.warp_mats.shape[:2]
        if self.warp_mats.shape != (n, q, 2, 2):
            raise ValueError(f"warp_mats shape {self.warp_mats.shape}")
        if self.warp_offsets.shape != (n, q, 2):
            raise ValueError(f"warp_offsets shape {self.warp_offsets.shape}")
        if self.kernels.ndim != 4 or self.kernels.shape[:2] != (n, q):
            raise ValueError(f"kernels shape {self.kernels.shape}")
        k = self.kernels.shape[2]
        if self.kernels.shape[3] != k or k % 2 == 0:
            raise ValueError("kernels must be square with odd size")
        if self.weights.ndim != 4 or self.weights.shape[:2] != (n, q):
            raise ValueError(f"weights shape {self.weights.shape}")
        if self.interpolation != "bilinear":
            raise ValueError("only bilinear interpolation is implemented")
        if self.boundary != "replicate":
            raise ValueError("only replicate boundary handling is implemented")
        if self.weight_downsample < 1:
            raise ValueError("weight_downsample must be >= 1")
        if self.weight_downsample == 1 and self.weights.shape[2:] != (self.height, self.width):
            raise ValueError("full-resolution weights must match the frame size")

    # -- basic introspection -------------------------------------------------

    @property
    def n_slices(self):
        return self.warp_mats.shape[0]

    @property
    def n_components(self):
        return self.warp_mats.shape[1]

    @property
    def kernel_size(self):
        return self.kernels.shape[2]

    @property
    def frame_shape(self):
        return (self.height, self.width)

    def component_warp(self, k, q):
        return AffineWarp(self.warp_mats[k, q].copy(), self.warp_offsets[k, q].copy())

    def weight_map(self, k, q):
        """Full-resolution weight map for (slice, component)."""
        wsm = self.weights[k, q]
        if wsm.shape == (self.height, self.width):
            return wsm
        return _kn.upsample_bilinear(wsm, self.height, self.width)

    def copy(self):
        return SeidelConvModel(
            warp_mats=self.warp_mats.copy(),
            warp_offsets=self.warp_offsets.copy(),
            kernels=self.kernels.copy(),
            weights=self.weights.copy(),
            height=self.height, width=self.width,
            weight_downsample=self.weight_downsample)

    def slice_subset(self, ks):
        """Model restricted to the given slice indices (copies)."""
        ks = list(ks)
        return SeidelConvModel(
            warp_mats=self.warp_mats[ks].copy(),
            warp_offsets=self.warp_offsets[ks].copy(),
            kernels=self.kernels[ks].copy(),
            weights=self.weights[ks].copy(),
            height=self.height, width=self.width,
            weight_downsample=self.weight_downsample)

    @classmethod
    def identity(cls, height, width, n_slices=1, n_components=1, kernel_size=1):
        """Model whose forward is the identity on every slice."""
        n, q, k = n_slices, n_components, kernel_size
        mats = np.tile(np.eye(2), (n, q, 1, 1))
        offs = np.zeros((n, q, 2))
        kerns = np.zeros((n, q, k, k))
        kerns[:, :, k // 2, k // 2] = 1.0
        weights = np.full((n, q, height, width), 1.0 / q)
        return cls(warp_mats=mats, warp_offsets=offs, kernels=kerns,
                   weights=weights, height=height, width=width)

    # -- operator interface ----------------------------------------------

    def forward(self, img, k):
        return forward(self, img, k)

    def adjoint(self, res, k):
        return adjoint(self, res, k)


def _check_slice(model, k):
    if not 0 <= k < model.n_slices:
        raise IndexError(f"slice {k} out of range for model with {model.n_slices}")


def forward(model, img, k):
    """Apply the slice-k blur operator to an image."""
    img = validate_image(img)
    if img.shape != model.frame_shape:
        raise ValueError(f"image shape {img.shape} != model frame {model.frame_shape}")
    _check_slice(model, k)
    out = np.zeros(model.frame_shape, dtype=np.float64)
    for q in range(model.n_components):
        warped = _kn.warp_bilinear(img, model.warp_mats[k, q], model.warp_offsets[k, q])
        blurred = _kn.conv2d_rep(warped, model.kernels[k, q])
        out += model.weight_map(k, q) * blurred
    return out


def adjoint(model, res, k):
    """Apply the exact transpose of forward(., k)."""
    res = validate_image(res, "residual")
    if res.shape != model.frame_shape:
        raise ValueError(f"residual shape {res.shape} != model frame {model.frame_shape}")
    _check_slice(model, k)
    out = np.zeros(model.frame_shape, dtype=np.float64)
    for q in range(model.n_components):
        weighted = model.weight_map(k, q) * res
        corr = _kn.conv2d_rep_adjoint(weighted, model.kernels[k, q])
        out += _kn.warp_bilinear_adjoint(corr, model.warp_mats[k, q],
                                         model.warp_offsets[k, q])
    return out


@dataclass
class ParamGradients:
    """Gradients for one slice's parameters, ordered like the model arrays."""
    warp_mats: np.ndarray     # (Q, 2, 2)
    warp_offsets: np.ndarray  # (Q, 2)
    kernels: np.ndarray       # (Q, K, K)
    weights: np.ndarray       # (Q, Hs, Ws)


def param_gradients(model, img, residual, k, lambda_kern=0.0):
    """Analytic gradients of 0.5 * ||forward(img, k) - target||^2.

    ``residual`` must be forward(img, k) - target.  When lambda_kern > 0
    the kernel gradient additionally carries the subgradient of
    lambda_kern * sum|h| (zero at exact zeros).
    """
    img = validate_image(img)
    residual = validate_image(residual, "residual")
    _check_slice(model, k)
    q_n = model.n_components
    ksz = model.kernel_size
    hs, ws = model.weights.shape[2:]
    full_weights = model.weights.shape[2:] == (model.height, model.width)
    g_mats = np.empty((q_n, 2, 2))
    g_offs = np.empty((q_n, 2))
    g_kerns = np.empty((q_n, ksz, ksz))
    g_weights = np.empty((q_n, hs, ws))
    for q in range(q_n):
        mat = model.warp_mats[k, q]
        off = model.warp_offsets[k, q]
        warped = _kn.warp_bilinear(img, mat, off)
        blurred = _kn.conv2d_rep(warped, model.kernels[k, q])
        gw_full = residual * blurred
        if full_weights:
            g_weights[q] = gw_full
            w_full = model.weights[k, q]
        else:
            g_weights[q] = _kn.upsample_bilinear_adjoint(gw_full, hs, ws)
            w_full = _kn.upsample_bilinear(model.weights[k, q], model.height, model.width)
        wres = w_full * residual
        g_kerns[q] = _kn.conv2d_kernel_grad(warped, wres, ksz)
        if lambda_kern:
            g_kerns[q] += lambda_kern * np.sign(model.kernels[k, q])
        upstream = _kn.conv2d_rep_adjoint(wres, model.kernels[k, q])
        gm, go = _kn.warp_affine_grad(img, mat, off, upstream)
        g_mats[q] = gm
        g_offs[q] = go
    return ParamGradients(warp_mats=g_mats, warp_offsets=g_offs,
                          kernels=g_kerns, weights=g_weights)


def lipschitz_estimate(model, slices=None, iters=30, seed=0):
    """Power-iteration bound on || sum_k A_k^T A_k ||_2.

    Works for any operator exposing forward/adjoint/n_slices/frame_shape.
    The estimate is nondecreasing in ``iters`` (up to rounding) and never
    exceeds the true norm.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    ks = range(model.n_slices) if slices is None else list(slices)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(model.frame_shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        acc = np.zeros(model.frame_shape, dtype=np.float64)
        for k in ks:
            acc += model.adjoint(model.forward(v, k), k)
        norm = float(np.linalg.norm(acc))
        if norm == 0.0:
            return 0.0
        est = norm
        v = acc / norm
    return est
