"""Cross-checks between the compiled kernels and the plain-numpy ones.

Both implementations are imported directly so the suite exercises them
regardless of which backend the environment variable selects.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from mirrordeconv import _backend
from mirrordeconv import _kernels_numpy as knp

nb = pytest.importorskip("numba")
from mirrordeconv import _kernels_numba as knb  # noqa: E402


def warp_case(rng, h=21, w=25):
    img = np.ascontiguousarray(rng.standard_normal((h, w)))
    mat = np.ascontiguousarray(np.eye(2) + 0.06 * rng.standard_normal((2, 2)))
    off = np.ascontiguousarray(rng.uniform(-1.5, 1.5, 2))
    return img, mat, off


class TestKernelParity:
    def test_warp_forward_adjoint_grad(self, rng):
        for _ in range(5):
            img, mat, off = warp_case(rng)
            np.testing.assert_allclose(knb.warp_bilinear(img, mat, off),
                                       knp.warp_bilinear(img, mat, off),
                                       atol=1e-13)
            res = np.ascontiguousarray(rng.standard_normal(img.shape))
            np.testing.assert_allclose(
                knb.warp_bilinear_adjoint(res, mat, off),
                knp.warp_bilinear_adjoint(res, mat, off), atol=1e-13)
            gm_b, go_b = knb.warp_affine_grad(img, mat, off, res)
            gm_p, go_p = knp.warp_affine_grad(img, mat, off, res)
            np.testing.assert_allclose(gm_b, gm_p, atol=1e-11)
            np.testing.assert_allclose(go_b, go_p, atol=1e-11)

    def test_identity_warp_bitwise_on_both(self, rng):
        img = np.ascontiguousarray(rng.standard_normal((17, 19)))
        eye = np.eye(2)
        zero = np.zeros(2)
        assert np.array_equal(knb.warp_bilinear(img, eye, zero), img)
        assert np.array_equal(knp.warp_bilinear(img, eye, zero), img)

    def test_conv_family(self, rng):
        for k in (1, 3, 5):
            img = np.ascontiguousarray(rng.standard_normal((16, 20)))
            kern = np.ascontiguousarray(rng.standard_normal((k, k)))
            np.testing.assert_allclose(knb.conv2d_rep(img, kern),
                                       knp.conv2d_rep(img, kern), atol=1e-12)
            res = np.ascontiguousarray(rng.standard_normal((16, 20)))
            np.testing.assert_allclose(knb.conv2d_rep_adjoint(res, kern),
                                       knp.conv2d_rep_adjoint(res, kern),
                                       atol=1e-12)
            np.testing.assert_allclose(knb.conv2d_kernel_grad(img, res, k),
                                       knp.conv2d_kernel_grad(img, res, k),
                                       atol=1e-11)

    def test_upsample_pair(self, rng):
        small = np.ascontiguousarray(rng.standard_normal((5, 7)))
        np.testing.assert_allclose(knb.upsample_bilinear(small, 18, 23),
                                   knp.upsample_bilinear(small, 18, 23),
                                   atol=1e-13)
        res = np.ascontiguousarray(rng.standard_normal((18, 23)))
        np.testing.assert_allclose(knb.upsample_bilinear_adjoint(res, 5, 7),
                                   knp.upsample_bilinear_adjoint(res, 5, 7),
                                   atol=1e-12)

    def test_sv_blur_pair(self, rng):
        h, w, rad = 14, 16, 3
        img = np.ascontiguousarray(rng.random((h, w)))
        sig = 0.4 + rng.random((h, w))
        pxx = np.ascontiguousarray(1.0 / sig ** 2)
        pyy = np.ascontiguousarray(np.flipud(1.0 / sig ** 2).copy())
        pxy = np.zeros((h, w))
        zb = knb.gauss_norm(pxx, pxy, pyy, rad)
        zp = knp.gauss_norm(pxx, pxy, pyy, rad)
        np.testing.assert_allclose(zb, zp, rtol=1e-13)
        np.testing.assert_allclose(
            knb.sv_blur_gather(img, pxx, pxy, pyy, zb, rad),
            knp.sv_blur_gather(img, pxx, pxy, pyy, zp, rad), atol=1e-13)


class TestBackendSelection:
    def run_probe(self, env_value):
        env = dict(os.environ)
        if env_value is None:
            env.pop(_backend.ENV_VAR, None)
        else:
            env[_backend.ENV_VAR] = env_value
        out = subprocess.run(
            [sys.executable, "-c",
             "from mirrordeconv import active_backend; print(active_backend())"],
            capture_output=True, text=True, env=env, timeout=120)
        assert out.returncode == 0, out.stderr
        return out.stdout.strip()

    def test_forced_numpy(self):
        assert self.run_probe("numpy") == "numpy"

    def test_forced_numba(self):
        assert self.run_probe("numba") == "numba"

    def test_default_prefers_numba_here(self):
        assert self.run_probe(None) == "numba"

    def test_bad_value_rejected(self):
        env = dict(os.environ)
        env[_backend.ENV_VAR] = "fortran"
        out = subprocess.run([sys.executable, "-c", "import mirrordeconv"],
                             capture_output=True, text=True, env=env,
                             timeout=120)
        assert out.returncode != 0
        assert "fortran" in out.stderr

    def test_set_thread_count_accepts_any_positive(self):
        _backend.set_thread_count(1)
        _backend.set_thread_count(8)
