import numpy as np
import pytest

from mirrordeconv.seidelconv import SeidelConvModel


def random_model(rng, height, width, n_slices=1, n_components=2, kernel_size=5,
                 warp_scale=0.05, offset_scale=1.5, weight_downsample=1):
    """A generic random (but valid) model for operator-level tests."""
    n, q, k = n_slices, n_components, kernel_size
    mats = np.tile(np.eye(2), (n, q, 1, 1)) + warp_scale * rng.standard_normal((n, q, 2, 2))
    offs = offset_scale * rng.standard_normal((n, q, 2))
    kerns = rng.random((n, q, k, k))
    kerns /= kerns.sum(axis=(2, 3), keepdims=True)
    hs = max(1, height // weight_downsample)
    ws = max(1, width // weight_downsample)
    weights = rng.random((n, q, hs, ws)) / q
    return SeidelConvModel(warp_mats=mats, warp_offsets=offs, kernels=kerns,
                           weights=weights, height=height, width=width,
                           weight_downsample=weight_downsample)


def smooth_image(rng, height, width, blur=2.0):
    """Random nonnegative test image with moderate gradients."""
    from scipy.ndimage import gaussian_filter
    img = rng.random((height, width))
    img = gaussian_filter(img, blur, mode="nearest")
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    return img


def gradcheck_problem(seed, height=32, width=32, n_components=2, kernel_size=5,
                      weight_downsample=1):
    """Random (model, img, target) triple safe for finite differencing.

    Bilinear interpolation has derivative kinks wherever a sample
    coordinate crosses an integer, so warps are drawn with offsets whose
    fractional part stays in [0.3, 0.45] and with matrix perturbations
    small enough (<= ~2e-2 px across the frame) that no sample lands
    within the FD step of a kink.  That keeps central differences valid
    at step 1e-4 without touching the operator itself.
    """
    from scipy.ndimage import gaussian_filter
    rng = np.random.default_rng(seed)
    n, q, k = 1, n_components, kernel_size
    mats = np.tile(np.eye(2), (n, q, 1, 1)) + 5e-4 * rng.standard_normal((n, q, 2, 2))
    offs = (rng.integers(0, 2, (n, q, 2)) * 2.0 - 1.0) * rng.uniform(0.3, 0.45, (n, q, 2))
    kerns = rng.random((n, q, k, k))
    kerns /= kerns.sum(axis=(2, 3), keepdims=True)
    hs = max(2, height // weight_downsample)
    ws = max(2, width // weight_downsample)
    weights = rng.random((n, q, hs, ws)) / q
    model = SeidelConvModel(warp_mats=mats, warp_offsets=offs, kernels=kerns,
                            weights=weights, height=height, width=width,
                            weight_downsample=weight_downsample)
    img = gaussian_filter(rng.random((height, width)), 1.5, mode="nearest")
    target = gaussian_filter(rng.random((height, width)), 1.5, mode="nearest")
    return model, img, target


def flatten_slice_params(model, k=0):
    return np.concatenate([model.warp_mats[k].ravel(), model.warp_offsets[k].ravel(),
                           model.kernels[k].ravel(), model.weights[k].ravel()])


def unflatten_slice_params(model, theta, k=0):
    """Return a copy of model with slice-k parameters replaced by theta."""
    m = model.copy()
    q = m.n_components
    ksz = m.kernel_size
    hs, ws = m.weights.shape[2:]
    sizes = [q * 4, q * 2, q * ksz * ksz, q * hs * ws]
    parts = np.split(np.asarray(theta, dtype=np.float64), np.cumsum(sizes)[:-1])
    m.warp_mats[k] = parts[0].reshape(q, 2, 2)
    m.warp_offsets[k] = parts[1].reshape(q, 2)
    m.kernels[k] = parts[2].reshape(q, ksz, ksz)
    m.weights[k] = parts[3].reshape(q, hs, ws)
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
