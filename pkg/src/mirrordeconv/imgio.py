"""Image containers and file formats.

Images are plain 2-D numpy arrays: row-major, pixel (0, 0) at the top
left, finite values only.  All computation happens in float64; files
store float32.  Two formats live here:

* grayscale PFM ("Pf") for images -- little-endian payload, bottom row
  first, scale line sign encodes endianness;
* the ``.scnv`` binary container for calibrated blur models -- a 16-byte
  header (magic ``SCNV``, then six uint16: version, Q, N, K, H, W)
  followed by one record per (slice k, component q), k-major: 6 affine
  floats (row-major 2x3, [[m00, m01, tx], [m10, m11, ty]]), K*K kernel
  floats, H*W weight floats, everything little-endian float32.
"""

import io
import struct

import numpy as np

MODEL_MAGIC = b"SCNV"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sHHHHHH")


def validate_image(arr, name="image"):
    """Coerce to a C-contiguous float64 2-D array, rejecting bad input."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    a = np.ascontiguousarray(a, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains NaN or infinite values")
    return a


# ---------------------------------------------------------------------------
# PFM

def _read_token(stream):
    # tokens are separated by arbitrary whitespace, per the format
    tok = b""
    while True:
        c = stream.read(1)
        if not c:
            raise ValueError("truncated PFM header")
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def decode_pfm(stream):
    """Read one PFM frame from a binary stream and return float64 data."""
    tag = _read_token(stream)
    if tag == b"PF":
        raise ValueError("color PFM ('PF') is not supported, expected grayscale 'Pf'")
    if tag != b"Pf":
        raise ValueError(f"not a PFM stream (tag {tag!r})")
    try:
        width = int(_read_token(stream))
        height = int(_read_token(stream))
        scale = float(_read_token(stream))
    except ValueError as exc:
        raise ValueError(f"malformed PFM header: {exc}") from None
    if width <= 0 or height <= 0:
        raise ValueError(f"bad PFM dimensions {width}x{height}")
    if scale == 0.0:
        raise ValueError("PFM scale must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    nbytes = width * height * 4
    payload = stream.read(nbytes)
    if len(payload) < nbytes:
        raise ValueError(f"truncated PFM: payload short by {nbytes - len(payload)} bytes")
    data = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    # rows are stored bottom-up
    return np.flipud(data).astype(np.float64)


def encode_pfm(img):
    """Serialize an image to PFM bytes (little-endian, bottom row first)."""
    a = validate_image(img)
    h, w = a.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.flipud(a).astype("<f4").tobytes()


def read_pfm(path):
    with open(path, "rb") as f:
        return decode_pfm(f)


def write_pfm(img, path):
    data = encode_pfm(img)
    with open(path, "wb") as f:
        f.write(data)


# ---------------------------------------------------------------------------
# Focal stacks

class FocalStack:
    """An ordered set of slices captured at axial positions z0 + k*dz (um)."""

    def __init__(self, data, z0, dz, corrected=False):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"stack data must be (N, H, W), got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("stack contains NaN or infinite values")
        self.data = np.ascontiguousarray(data)
        self.z0 = float(z0)
        self.dz = float(dz)
        self.corrected = bool(corrected)

    @property
    def n_slices(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape[1:]

    def z(self, k):
        return self.z0 + k * self.dz

    def zs(self):
        return self.z0 + self.dz * np.arange(self.n_slices)

    def slice(self, k):
        return self.data[k]

    def prefix(self, n):
        """First n slices as a new stack (shares the buffer)."""
        if not 1 <= n <= self.n_slices:
            raise ValueError(f"cannot take {n} slices from a stack of {self.n_slices}")
        return FocalStack(self.data[:n], self.z0, self.dz, corrected=self.corrected)


# ---------------------------------------------------------------------------
# Model container

def model_file_size(q, n, k, h, w):
    """Byte size of a .scnv file with the given dimensions."""
    return _MODEL_HEADER.size + n * q * (6 + k * k + h * w) * 4


def save_model(model, path):
    """Write a calibrated model to a .scnv container.

    Downsampled weight maps are materialized at full resolution first;
    the file always stores one float per pixel per component.
    """
    n, q = model.n_slices, model.n_components
    k = model.kernel_size
    h, w = model.height, model.width
    for dim, label in ((q, "Q"), (n, "N"), (k, "K"), (h, "H"), (w, "W")):
        if not 0 < dim < 65536:
            raise ValueError(f"model dimension {label}={dim} does not fit the container")
    buf = io.BytesIO()
    buf.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, q, n, k, h, w))
    affine = np.empty(6, dtype="<f4")
    for ki in range(n):
        for qi in range(q):
            mat = model.warp_mats[ki, qi]
            off = model.warp_offsets[ki, qi]
            affine[0] = mat[0, 0]
            affine[1] = mat[0, 1]
            affine[2] = off[0]
            affine[3] = mat[1, 0]
            affine[4] = mat[1, 1]
            affine[5] = off[1]
            buf.write(affine.tobytes())
            buf.write(model.kernels[ki, qi].astype("<f4").tobytes())
            buf.write(model.weight_map(ki, qi).astype("<f4").tobytes())
    data = buf.getvalue()
    expected = model_file_size(q, n, k, h, w)
    assert len(data) == expected, (len(data), expected)
    with open(path, "wb") as f:
        f.write(data)


def load_model(path):
    from .seidelconv import SeidelConvModel

    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _MODEL_HEADER.size:
        raise ValueError(f"model file too short ({len(raw)} bytes)")
    magic, version, q, n, k, h, w = _MODEL_HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise ValueError(f"bad model magic {magic!r}")
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    expected = model_file_size(q, n, k, h, w)
    if len(raw) != expected:
        raise ValueError(
            f"model payload size mismatch: expected {expected} bytes, got {len(raw)}")
    mats = np.empty((n, q, 2, 2), dtype=np.float64)
    offs = np.empty((n, q, 2), dtype=np.float64)
    kerns = np.empty((n, q, k, k), dtype=np.float64)
    weights = np.empty((n, q, h, w), dtype=np.float64)
    pos = _MODEL_HEADER.size
    for ki in range(n):
        for qi in range(q):
            a = np.frombuffer(raw, dtype="<f4", count=6, offset=pos)
            pos += 24
            mats[ki, qi] = [[a[0], a[1]], [a[3], a[4]]]
            offs[ki, qi] = [a[2], a[5]]
            kerns[ki, qi] = np.frombuffer(
                raw, dtype="<f4", count=k * k, offset=pos).reshape(k, k)
            pos += 4 * k * k
            weights[ki, qi] = np.frombuffer(
                raw, dtype="<f4", count=h * w, offset=pos).reshape(h, w)
            pos += 4 * h * w
    return SeidelConvModel(warp_mats=mats, warp_offsets=offs, kernels=kerns,
                           weights=weights, height=h, width=w)
