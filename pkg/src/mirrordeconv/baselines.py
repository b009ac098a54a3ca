"""Reference operators the calibrated model is evaluated against.

* CoordGateOperator: weighted mixture of stationary kernels -- exactly
  the main model with every warp pinned to the identity, implemented
  without warps at all.  Matching the warp-free model bit for bit is a
  correctness check, and fitting it (freeze_warps=True) gives the
  warp-ablation baseline.
* PatchwiseModel: one kernel per tile of a coarse grid, cross-faded
  with ramps that sum to exactly 1.0 everywhere (ramp values are
  quantized to multiples of 2**-20, so products and sums stay exact in
  float64).
* MaskWeightedOperator: collapses a multi-slice operator into a
  single-slice one through per-slice masks.  With uniform masks this is
  the stack-average baseline; with feathered best-focus masks it is the
  field-curvature-aware composite.
"""

import numpy as np
from scipy.ndimage import gaussian_filter

from ._backend import kernels as _kn
from .calib import best_focus, best_focus_slice
from .imgio import FocalStack, validate_image

RAMP_QUANTUM = 2.0 ** -20


class CoordGateOperator:
    """Per-slice weighted sums of stationary convolutions."""

    def __init__(self, kernels, weights, height, width):
        self.kernels = np.ascontiguousarray(kernels, dtype=np.float64)
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        if self.kernels.ndim != 4 or self.weights.ndim != 4:
            raise ValueError("kernels (N,Q,K,K) and weights (N,Q,H,W)")
        n, q, k, k2 = self.kernels.shape
        if k != k2 or k % 2 == 0:
            raise ValueError("kernels must be square with odd size")
        if self.weights.shape != (n, q, height, width):
            raise ValueError(f"weights shape {self.weights.shape}")
        self.height = int(height)
        self.width = int(width)

    @classmethod
    def from_seidelconv(cls, model):
        """Strip the (identity) warps off a fitted model."""
        eye = np.eye(2)
        for k in range(model.n_slices):
            for q in range(model.n_components):
                if (not np.array_equal(model.warp_mats[k, q], eye)
                        or np.any(model.warp_offsets[k, q] != 0.0)):
                    raise ValueError("model has non-identity warps; fit with "
                                     "freeze_warps to get a gate-only model")
        weights = np.stack([
            np.stack([model.weight_map(k, q)
                      for q in range(model.n_components)])
            for k in range(model.n_slices)])
        return cls(model.kernels.copy(), weights, model.height, model.width)

    @property
    def n_slices(self):
        return self.kernels.shape[0]

    @property
    def n_components(self):
        return self.kernels.shape[1]

    @property
    def frame_shape(self):
        return (self.height, self.width)

    def forward(self, img, k):
        img = validate_image(img)
        out = np.zeros_like(img)
        for q in range(self.n_components):
            out += self.weights[k, q] * _kn.conv2d_rep(img, self.kernels[k, q])
        return out

    def adjoint(self, res, k):
        res = validate_image(res, "residual")
        out = np.zeros_like(res)
        for q in range(self.n_components):
            out += _kn.conv2d_rep_adjoint(self.weights[k, q] * res,
                                          self.kernels[k, q])
        return out


# --------------------------------------------------------------------------
# patchwise kernels


def crossfade_masks(length, n_tiles, overlap):
    """1-D tile masks that sum to exactly 1.0 at every sample.

    Tiles touch at round(i * length / n) and blend linearly across
    ``overlap`` samples.  Ramp values are quantized to multiples of
    2**-20 and each pair is an exact complement, which keeps the later
    2-D products and their sums exact in float64.
    """
    if n_tiles < 1 or length < n_tiles:
        raise ValueError("need at least one sample per tile")
    masks = np.zeros((n_tiles, length))
    edges = [int(round(i * length / n_tiles)) for i in range(n_tiles + 1)]
    for i in range(n_tiles):
        masks[i, edges[i]:edges[i + 1]] = 1.0
    min_tile = min(edges[i + 1] - edges[i] for i in range(n_tiles))
    overlap = max(0, min(int(overlap), min_tile - 1))
    if overlap == 0 or n_tiles == 1:
        return masks
    for b in range(1, n_tiles):
        mid = edges[b]
        lo = mid - (overlap + 1) // 2
        hi = lo + overlap
        lo = max(lo, 0)
        hi = min(hi, length)
        for j in range(lo, hi):
            t = (j - lo + 0.5) / (hi - lo)
            tq = round(t / RAMP_QUANTUM) * RAMP_QUANTUM
            masks[b - 1, j] = 1.0 - tq
            masks[b, j] = tq
    return masks


def default_grid(height, width, tile=64):
    """Tile counts used when none are given: ~one tile per 64 px, min 2."""
    return (max(2, -(-height // tile)), max(2, -(-width // tile)))


class PatchwiseModel:
    """Per-tile stationary kernels, cross-faded into one operator."""

    def __init__(self, kernels, height, width, overlap=None):
        self.kernels = np.ascontiguousarray(kernels, dtype=np.float64)
        if self.kernels.ndim != 5:
            raise ValueError("kernels must be (N, Ty, Tx, K, K)")
        n, ty, tx, k, k2 = self.kernels.shape
        if k != k2 or k % 2 == 0:
            raise ValueError("kernels must be square with odd size")
        self.height = int(height)
        self.width = int(width)
        self.overlap = int(overlap) if overlap is not None else k - 1
        self._my = crossfade_masks(self.height, ty, self.overlap)
        self._mx = crossfade_masks(self.width, tx, self.overlap)

    @property
    def n_slices(self):
        return self.kernels.shape[0]

    @property
    def grid(self):
        return self.kernels.shape[1:3]

    @property
    def kernel_size(self):
        return self.kernels.shape[3]

    @property
    def frame_shape(self):
        return (self.height, self.width)

    def blend(self, ty, tx):
        return np.outer(self._my[ty], self._mx[tx])

    def forward(self, img, k):
        img = validate_image(img)
        out = np.zeros_like(img)
        for ty in range(self.grid[0]):
            for tx in range(self.grid[1]):
                out += self.blend(ty, tx) * _kn.conv2d_rep(
                    img, self.kernels[k, ty, tx])
        return out

    def adjoint(self, res, k):
        res = validate_image(res, "residual")
        out = np.zeros_like(res)
        for ty in range(self.grid[0]):
            for tx in range(self.grid[1]):
                out += _kn.conv2d_rep_adjoint(
                    self.blend(ty, tx) * res, self.kernels[k, ty, tx])
        return out


def _shift_basis(img, ksize):
    """Columns of the local convolution design matrix.

    Column (a, b) holds conv2d_rep(img, delta at (a, b)) flattened; the
    convolution of img with any kernel is the matrix-vector product.
    """
    h, w = img.shape
    m = ksize // 2
    pad = np.pad(img, m, mode="edge")
    cols = np.empty((h * w, ksize * ksize))
    i = 0
    for a in range(ksize):
        for b in range(ksize):
            # true convolution: tap (a, b) reads from offset m - a, m - b
            cols[:, i] = pad[2 * m - a:2 * m - a + h,
                             2 * m - b:2 * m - b + w].ravel()
            i += 1
    return cols


def fit_patchwise(targets, stacks, kernel_size, grid=None, ridge=1e-8):
    """Least-squares per-tile kernels from calibration pairs.

    Each tile solves its own normal equations over the pixels it owns
    (weighted by the blend mask), pooled over all targets.  Targets are
    processed one at a time so only one design matrix is live.
    """
    if not targets or len(targets) != len(stacks):
        raise ValueError("need one recorded stack per target")
    targets = [validate_image(t, "target") for t in targets]
    h, w = targets[0].shape
    n = stacks[0].n_slices
    if grid is None:
        grid = default_grid(h, w)
    ty_n, tx_n = grid
    taps = kernel_size ** 2
    probe = PatchwiseModel(np.zeros((n, ty_n, tx_n, kernel_size,
                                     kernel_size)), h, w)
    tiles = [(ty, tx) for ty in range(ty_n) for tx in range(tx_n)]
    supports = []
    for ty, tx in tiles:
        wgt = probe.blend(ty, tx).ravel()
        rows = wgt > 0
        supports.append((rows, wgt[rows][:, None]))
    grams = np.zeros((len(tiles), taps, taps))
    rhs = np.zeros((len(tiles), n, taps))
    for t_img, stack in zip(targets, stacks):
        basis = _shift_basis(t_img, kernel_size)
        for i, (rows, wcol) in enumerate(supports):
            sub = basis[rows]
            bw = sub * wcol
            grams[i] += sub.T @ bw
            for k in range(n):
                rhs[i, k] += bw.T @ stack.slice(k).ravel()[rows]
    kernels = np.zeros((n, ty_n, tx_n, kernel_size, kernel_size))
    eye = ridge * np.eye(taps)
    for i, (ty, tx) in enumerate(tiles):
        for k in range(n):
            sol = np.linalg.solve(grams[i] + eye, rhs[i, k])
            kernels[k, ty, tx] = sol.reshape(kernel_size, kernel_size)
    return PatchwiseModel(kernels, h, w)


# --------------------------------------------------------------------------
# composite single-image reductions


class MaskWeightedOperator:
    """Single-slice view of a multi-slice operator: sum_k m_k * A_k."""

    def __init__(self, model, masks):
        masks = np.ascontiguousarray(masks, dtype=np.float64)
        if masks.shape != (model.n_slices,) + tuple(model.frame_shape):
            raise ValueError(f"masks shape {masks.shape} does not match "
                             f"the operator")
        if masks.min() < 0:
            raise ValueError("masks must be nonnegative")
        self.model = model
        self.masks = masks

    @property
    def n_slices(self):
        return 1

    @property
    def frame_shape(self):
        return tuple(self.model.frame_shape)

    def forward(self, img, k):
        if k != 0:
            raise IndexError("composite operator has a single slice")
        out = np.zeros(self.frame_shape)
        for j in range(self.model.n_slices):
            out += self.masks[j] * self.model.forward(img, j)
        return out

    def adjoint(self, res, k):
        if k != 0:
            raise IndexError("composite operator has a single slice")
        res = validate_image(res, "residual")
        out = np.zeros(self.frame_shape)
        for j in range(self.model.n_slices):
            out += self.model.adjoint(self.masks[j] * res, j)
        return out


def stack_average(stack):
    """Plain mean of the slices (also the solver's default start)."""
    return stack.data.mean(axis=0)


def averaged_operator(model):
    """Operator matching the stack average: mean_k A_k."""
    n = model.n_slices
    masks = np.full((n,) + tuple(model.frame_shape), 1.0 / n)
    return MaskWeightedOperator(model, masks)


def averaged_observation(stack):
    return FocalStack(stack.data.mean(axis=0, keepdims=True),
                      z0=stack.z0 + 0.5 * stack.dz * (stack.n_slices - 1),
                      dz=stack.dz, corrected=stack.corrected)


def petzval_composite(model, stack, feather_px=3.0, window=7):
    """Best-focus composite and its matching operator.

    Every pixel takes the slice that is sharpest there (ties toward the
    smaller sensor position); the winner masks are feathered and
    renormalized to a partition of unity.
    """
    kmap, _ = best_focus(stack, window)
    n = stack.n_slices
    masks = np.empty((n,) + tuple(stack.shape))
    for k in range(n):
        masks[k] = gaussian_filter((kmap == k).astype(np.float64),
                                   feather_px, mode="nearest")
    total = masks.sum(axis=0)
    masks /= np.maximum(total, 1e-12)
    composite = np.zeros(stack.shape)
    for k in range(n):
        composite += masks[k] * stack.slice(k)
    op = MaskWeightedOperator(model, masks)
    obs = FocalStack(composite[None], z0=stack.z0, dz=stack.dz,
                     corrected=stack.corrected)
    return op, obs


def single_slice(model, stack, k=None, window=7):
    """One slice and its matching single-slice operator.

    With k=None the slice sharpest over the central region is used.
    """
    if k is None:
        k = best_focus_slice(stack, window)
    if not 0 <= k < stack.n_slices:
        raise IndexError(f"slice {k} out of range")
    op = model.slice_subset([k])
    obs = FocalStack(stack.data[k:k + 1], z0=stack.z(k), dz=stack.dz,
                     corrected=stack.corrected)
    return op, obs, k
