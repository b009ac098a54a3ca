import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mirrordeconv import imgio
from mirrordeconv.imgio import (FocalStack, decode_pfm, encode_pfm,
                                load_model, model_file_size, read_pfm,
                                save_model, write_pfm)
from mirrordeconv.seidelconv import SeidelConvModel


def f32(*vals):
    return np.array(vals, dtype="<f4").tobytes()


class TestPfm:
    def test_decode_hand_built_2x2(self):
        # bottom row first in the payload: file rows (3, 4) then (1, 2)
        blob = b"Pf\n2 2\n-1.0\n" + f32(3.0, 4.0, 1.0, 2.0)
        img = decode_pfm(io.BytesIO(blob))
        assert img.shape == (2, 2)
        assert np.array_equal(img, [[1.0, 2.0], [3.0, 4.0]])

    def test_big_endian_payload(self):
        payload = np.array([3.0, 4.0, 1.0, 2.0], dtype=">f4").tobytes()
        img = decode_pfm(io.BytesIO(b"Pf\n2 2\n1.0\n" + payload))
        assert np.array_equal(img, [[1.0, 2.0], [3.0, 4.0]])

    def test_header_whitespace_variants(self):
        blob = b"Pf 2 2 -1.0 " + f32(3.0, 4.0, 1.0, 2.0)
        img = decode_pfm(io.BytesIO(blob))
        assert np.array_equal(img, [[1.0, 2.0], [3.0, 4.0]])

    def test_color_pfm_rejected(self):
        with pytest.raises(ValueError, match="color PFM"):
            decode_pfm(io.BytesIO(b"PF\n1 1\n-1.0\n" + f32(0, 0, 0)))

    def test_truncated_payload_reports_shortfall(self):
        blob = b"Pf\n2 2\n-1.0\n" + f32(3.0, 4.0, 1.0)  # one float missing
        with pytest.raises(ValueError, match=r"payload short by 4 bytes"):
            decode_pfm(io.BytesIO(blob))

    def test_garbage_rejected(self):
        with pytest.raises(ValueError):
            decode_pfm(io.BytesIO(b"P6\n2 2\n255\n" + bytes(12)))
        with pytest.raises(ValueError):
            decode_pfm(io.BytesIO(b"Pf\n2 junk\n-1.0\n" + bytes(16)))
        with pytest.raises(ValueError):
            decode_pfm(io.BytesIO(b"Pf\n0 2\n-1.0\n"))

    def test_nonfinite_rejected_on_write(self):
        img = np.ones((3, 3))
        img[1, 1] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            encode_pfm(img)

    @settings(max_examples=40, deadline=None)
    @given(arrays(dtype=np.float32,
                  shape=st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-1e6, 1e6, width=32)))
    def test_round_trip_exact(self, img):
        blob = encode_pfm(img.astype(np.float64))
        back = decode_pfm(io.BytesIO(blob))
        assert back.shape == img.shape
        assert np.array_equal(back, img.astype(np.float64))
        # a second encode of the decoded image is byte-identical
        assert encode_pfm(back) == blob

    def test_file_round_trip(self, tmp_path, rng):
        img = rng.random((17, 23)).astype(np.float32).astype(np.float64)
        path = tmp_path / "img.pfm"
        write_pfm(img, path)
        assert np.array_equal(read_pfm(path), img)


class TestFocalStack:
    def test_z_values(self):
        st_ = FocalStack(np.zeros((3, 4, 5)), z0=100.0, dz=200.0)
        assert st_.z(0) == 100.0
        assert st_.z(2) == 500.0
        assert np.array_equal(st_.zs(), [100.0, 300.0, 500.0])

    def test_prefix(self):
        st_ = FocalStack(np.arange(24, dtype=float).reshape(4, 2, 3), 0.0, 100.0,
                         corrected=True)
        sub = st_.prefix(2)
        assert sub.n_slices == 2
        assert sub.corrected
        assert np.array_equal(sub.slice(1), st_.slice(1))
        with pytest.raises(ValueError):
            st_.prefix(5)

    def test_validation(self):
        with pytest.raises(ValueError):
            FocalStack(np.zeros((4, 5)), 0, 1)
        bad = np.zeros((2, 3, 3))
        bad[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            FocalStack(bad, 0, 1)


def small_model(rng, h=6, w=7, n=2, q=3, k=3):
    mats = (np.tile(np.eye(2), (n, q, 1, 1))
            + 0.01 * rng.standard_normal((n, q, 2, 2)))
    offs = rng.standard_normal((n, q, 2))
    kerns = rng.random((n, q, k, k))
    weights = rng.random((n, q, h, w))
    # keep everything exactly float32-representable so the container
    # round-trips bit for bit
    as32 = lambda a: a.astype(np.float32).astype(np.float64)
    return SeidelConvModel(warp_mats=as32(mats), warp_offsets=as32(offs),
                           kernels=as32(kerns), weights=as32(weights),
                           height=h, width=w)


class TestModelContainer:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        m = small_model(rng)
        path = tmp_path / "m.scnv"
        save_model(m, path)
        back = load_model(path)
        assert back.n_slices == m.n_slices
        assert back.n_components == m.n_components
        assert np.array_equal(back.warp_mats, m.warp_mats)
        assert np.array_equal(back.warp_offsets, m.warp_offsets)
        assert np.array_equal(back.kernels, m.kernels)
        assert np.array_equal(back.weights, m.weights)

    def test_file_size_matches_layout(self, tmp_path, rng):
        m = small_model(rng, h=6, w=7, n=2, q=3, k=3)
        path = tmp_path / "m.scnv"
        save_model(m, path)
        assert path.stat().st_size == model_file_size(3, 2, 3, 6, 7)
        assert path.stat().st_size == 16 + 2 * 3 * (6 + 9 + 42) * 4

    def test_full_scale_size_constant(self):
        # 16-byte header + N*Q*(6 + K^2 + H*W) float32 records
        assert model_file_size(31, 3, 11, 512, 640) == 121_944_220

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.scnv"
        path.write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(ValueError, match="magic"):
            load_model(path)

    def test_bad_version(self, tmp_path):
        head = struct.pack("<4sHHHHHH", b"SCNV", 9, 1, 1, 1, 2, 2)
        path = tmp_path / "bad.scnv"
        path.write_bytes(head + bytes(4 * (6 + 1 + 4)))
        with pytest.raises(ValueError, match="version"):
            load_model(path)

    def test_size_mismatch(self, tmp_path):
        head = struct.pack("<4sHHHHHH", b"SCNV", 1, 1, 1, 1, 2, 2)
        path = tmp_path / "bad.scnv"
        path.write_bytes(head + bytes(4))
        with pytest.raises(ValueError, match="size mismatch"):
            load_model(path)

    def test_downsampled_weights_are_baked_full_res(self, tmp_path, rng):
        h, w = 8, 10
        weights = rng.random((1, 2, 4, 5)).astype(np.float32).astype(np.float64)
        m = SeidelConvModel(
            warp_mats=np.tile(np.eye(2), (1, 2, 1, 1)),
            warp_offsets=np.zeros((1, 2, 2)),
            kernels=np.tile(np.eye(3)[None, None] / 3.0, (1, 2, 1, 1)),
            weights=weights, height=h, width=w, weight_downsample=2)
        path = tmp_path / "m.scnv"
        save_model(m, path)
        back = load_model(path)
        assert back.weights.shape == (1, 2, h, w)
        assert back.weight_downsample == 1
        expect = m.weight_map(0, 1).astype(np.float32).astype(np.float64)
        assert np.array_equal(back.weights[0, 1], expect)
