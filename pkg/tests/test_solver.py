import sys

import numpy as np
import pytest

from conftest import random_model, smooth_image
from mirrordeconv import solver
from mirrordeconv.imgio import FocalStack
from mirrordeconv.seidelconv import SeidelConvModel
from mirrordeconv.simulate import make_scene
from mirrordeconv.solver import (DenoiserClient, DenoiserError,
                                 DenoiserProtocolError, DenoiserTimeout,
                                 SolveConfig, deconvolve, tv_prox, tv_value)


def denoiser_cmd(mode):
    return [sys.executable, "-m", "mirrordeconv.denoisers", "--mode", mode]


def stack_for(model, truth, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    data = np.stack([model.forward(truth, k) for k in range(model.n_slices)])
    if noise > 0:
        data = data + rng.normal(0.0, noise, data.shape)
    return FocalStack(data, z0=0.0, dz=100.0, corrected=True)


class TestTvPieces:
    def test_grad_div_adjointness(self, rng):
        u = rng.standard_normal((13, 17))
        px = rng.standard_normal((13, 17))
        py = rng.standard_normal((13, 17))
        gx, gy = solver._tv_grad(u)
        lhs = float((gx * px).sum() + (gy * py).sum())
        rhs = -float((u * solver._tv_div(px, py)).sum())
        assert np.isclose(lhs, rhs, atol=1e-10)

    def test_tv_value(self):
        assert tv_value(np.full((6, 7), 3.2)) == 0.0
        step = np.zeros((5, 8))
        step[:, 4:] = 2.0          # one 2-high jump per row
        assert np.isclose(tv_value(step), 5 * 2.0)

    def test_prox_zero_weight_is_identity(self, rng):
        b = rng.standard_normal((9, 9))
        out = tv_prox(b, 0.0)
        assert np.array_equal(out, b)
        assert out is not b

    def test_prox_of_constant_is_exact(self):
        b = np.full((8, 10), 0.7)
        np.testing.assert_array_equal(tv_prox(b, 0.5), b)

    def test_prox_reduces_tv_and_keeps_mean(self, rng):
        b = smooth_image(rng, 24, 24) + 0.1 * rng.standard_normal((24, 24))
        out = tv_prox(b, 0.05)
        assert tv_value(out) < tv_value(b)
        assert np.isclose(out.mean(), b.mean(), atol=1e-10)

    def test_prox_near_converged_at_default_iters(self, rng):
        b = smooth_image(rng, 16, 16) + 0.05 * rng.standard_normal((16, 16))
        quick = tv_prox(b, 0.03)
        ref = tv_prox(b, 0.03, iters=2000)
        assert np.abs(quick - ref).max() < 5e-3

    def test_prox_lowers_objective(self, rng):
        b = smooth_image(rng, 20, 20) + 0.1 * rng.standard_normal((20, 20))
        mu = 0.05

        def objective(x):
            return 0.5 * float(((x - b) ** 2).sum()) + mu * tv_value(x)

        out = tv_prox(b, mu)
        assert objective(out) < objective(b)
        from scipy.ndimage import gaussian_filter
        assert objective(out) < objective(gaussian_filter(b, 1.0))


class TestSolveConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="prior must be one of"):
            SolveConfig(prior="wavelets")
        with pytest.raises(ValueError, match="at least one iteration"):
            SolveConfig(iters=0)
        with pytest.raises(ValueError, match="sigma_min"):
            SolveConfig(prior="pnp", sigma_min=0.1, sigma_max=0.01)
        with pytest.raises(ValueError, match="unknown init"):
            SolveConfig(init="ones")

    def test_from_mapping(self):
        cfg = SolveConfig.from_mapping({"prior": "l2", "lam": "0.01",
                                        "iters": "25"})
        assert cfg.prior == "l2" and cfg.lam == 0.01 and cfg.iters == 25
        with pytest.raises(ValueError, match="unknown solver option"):
            SolveConfig.from_mapping({"lambda": "1"})


class TestDeconvolve:
    def test_identity_single_slice_converges_fast(self, rng):
        h, w = 24, 30
        truth = smooth_image(rng, h, w)
        model = SeidelConvModel.identity(h, w)
        stack = stack_for(model, truth)
        x, info = deconvolve(model, stack,
                             SolveConfig(prior="none", iters=10))
        assert np.abs(x - truth).max() <= 1e-6 * np.abs(truth).max()
        assert info["iters"] == 10

    def test_identity_multi_slice_average(self, rng):
        # three identity observations of the same frame: the least
        # squares answer is their mean
        h, w = 16, 20
        ys = np.stack([smooth_image(rng, h, w) for _ in range(3)])
        stack = FocalStack(ys, z0=0.0, dz=100.0, corrected=True)
        model = SeidelConvModel.identity(h, w, n_slices=3)
        x, _ = deconvolve(model, stack, SolveConfig(prior="none", iters=20,
                                                    init="zeros"))
        np.testing.assert_allclose(x, ys.mean(axis=0), atol=1e-8)

    def test_l2_closed_form(self, rng):
        h, w = 16, 16
        truth = smooth_image(rng, h, w)
        model = SeidelConvModel.identity(h, w)
        stack = stack_for(model, truth)
        lam = 0.25
        x, _ = deconvolve(model, stack, SolveConfig(prior="l2", lam=lam,
                                                    iters=60))
        np.testing.assert_allclose(x, truth / (1.0 + 2.0 * lam), atol=1e-8)

    def test_loss_trace_is_monotone(self, rng):
        h, w = 28, 32
        model = random_model(rng, h, w, n_slices=2, n_components=2)
        truth = smooth_image(rng, h, w)
        stack = stack_for(model, truth, noise=0.01)
        _, info = deconvolve(model, stack,
                             SolveConfig(prior="tv", lam=1e-3, iters=40))
        losses = np.array(info["loss"])
        slack = np.abs(losses[:-1]) * 1e-9 + 1e-12
        assert np.all(losses[1:] <= losses[:-1] + slack)
        assert losses[-1] < losses[0]

    def test_tv_beats_no_prior_on_noisy_data(self, rng):
        h, w = 48, 56
        truth = make_scene(h, w, seed=3)
        model = random_model(rng, h, w, n_slices=2, n_components=2,
                             kernel_size=5, warp_scale=0.01,
                             offset_scale=0.3)
        model.kernels[:] = np.abs(model.kernels)
        model.kernels /= model.kernels.sum(axis=(2, 3), keepdims=True)
        model.weights[:] = 1.0 / model.n_components
        stack = stack_for(model, truth, noise=0.03, seed=5)
        x_none, _ = deconvolve(model, stack,
                               SolveConfig(prior="none", iters=80))
        x_tv, _ = deconvolve(model, stack,
                             SolveConfig(prior="tv", lam=2e-3, iters=80))
        err_none = float(((x_none - truth) ** 2).mean())
        err_tv = float(((x_tv - truth) ** 2).mean())
        assert err_tv < err_none

    def test_explicit_step_is_used(self, rng):
        h, w = 12, 12
        model = SeidelConvModel.identity(h, w)
        stack = stack_for(model, smooth_image(rng, h, w))
        _, info = deconvolve(model, stack,
                             SolveConfig(prior="none", iters=5, step=0.5))
        assert info["step"] == 0.5

    def test_callback_sees_every_iteration(self, rng):
        h, w = 12, 12
        model = SeidelConvModel.identity(h, w)
        stack = stack_for(model, smooth_image(rng, h, w))
        seen = []
        deconvolve(model, stack, SolveConfig(prior="none", iters=7),
                   callback=lambda i, x, val: seen.append(i))
        assert seen == list(range(7))

    def test_shape_mismatch_raises(self, rng):
        model = SeidelConvModel.identity(12, 12, n_slices=2)
        stack = stack_for(SeidelConvModel.identity(12, 12),
                          smooth_image(rng, 12, 12))
        with pytest.raises(ValueError, match="slices"):
            deconvolve(model, stack, SolveConfig(prior="none", iters=1))
        other = stack_for(SeidelConvModel.identity(10, 12, n_slices=2),
                          smooth_image(rng, 10, 12))
        with pytest.raises(ValueError, match="frame"):
            deconvolve(model, other, SolveConfig(prior="none", iters=1))


def f32_image(rng, h, w):
    return smooth_image(rng, h, w).astype(np.float32).astype(np.float64)


class TestDenoiserClient:
    def test_echo_round_trip_and_persistence(self, rng):
        img = f32_image(rng, 20, 24)
        with DenoiserClient(denoiser_cmd("echo"), timeout=10.0) as client:
            out1 = client.denoise(img, 0.05)
            out2 = client.denoise(2.0 * img, 0.01)
        np.testing.assert_array_equal(out1, img)
        np.testing.assert_array_equal(out2, 2.0 * img)

    def test_smooth_mode_smooths(self, rng):
        img = f32_image(rng, 24, 24) + 0.2 * rng.standard_normal((24, 24))
        with DenoiserClient(denoiser_cmd("smooth"), timeout=10.0) as client:
            out = client.denoise(img, 0.05)
        assert out.shape == img.shape
        assert tv_value(out) < tv_value(img)

    def test_wrong_size_reply(self, rng):
        with DenoiserClient(denoiser_cmd("wrong_size"), timeout=10.0) as client:
            with pytest.raises(DenoiserProtocolError, match="4x4"):
                client.denoise(f32_image(rng, 16, 16), 0.05)

    def test_garbage_reply(self, rng):
        with DenoiserClient(denoiser_cmd("garbage"), timeout=10.0) as client:
            with pytest.raises(DenoiserProtocolError, match="bad denoiser reply"):
                client.denoise(f32_image(rng, 16, 16), 0.05)

    def test_exit_without_reply(self, rng):
        with DenoiserClient(denoiser_cmd("quit"), timeout=10.0) as client:
            with pytest.raises(DenoiserError, match="code 3"):
                client.denoise(f32_image(rng, 16, 16), 0.05)

    def test_hang_times_out_and_kills(self, rng):
        client = DenoiserClient(denoiser_cmd("hang"), timeout=1.0)
        with pytest.raises(DenoiserTimeout, match="within 1s"):
            client.denoise(f32_image(rng, 16, 16), 0.05)
        client._proc.wait(timeout=5.0)
        assert client._proc.poll() is not None

    def test_missing_binary(self):
        with pytest.raises(DenoiserError, match="cannot start"):
            DenoiserClient(["definitely-not-a-real-denoiser-binary"])

    def test_use_after_close(self, rng):
        client = DenoiserClient(denoiser_cmd("echo"), timeout=10.0)
        client.close()
        with pytest.raises(DenoiserError, match="exited"):
            client.denoise(f32_image(rng, 8, 8), 0.05)

    def test_empty_command(self):
        with pytest.raises(ValueError, match="empty denoiser command"):
            DenoiserClient("")


class TestPnp:
    def test_echo_matches_no_prior_on_identity(self, rng):
        h, w = 20, 24
        truth = smooth_image(rng, h, w)
        model = SeidelConvModel.identity(h, w)
        stack = stack_for(model, truth)
        x_none, _ = deconvolve(model, stack,
                               SolveConfig(prior="none", iters=10))
        cfg = SolveConfig(prior="pnp", iters=10, data_steps=5,
                          denoiser_cmd=" ".join(denoiser_cmd("echo")),
                          denoiser_timeout=15.0)
        x_pnp, info = deconvolve(model, stack, cfg)
        assert np.abs(x_pnp - x_none).max() < 1e-6
        assert info["prior"] == "pnp"
        assert len(info["sigmas"]) == 10

    def test_smooth_denoiser_runs(self, rng):
        h, w = 24, 28
        truth = make_scene(h, w, seed=1)
        model = random_model(rng, h, w, n_slices=2, n_components=2,
                             kernel_size=3, warp_scale=0.01, offset_scale=0.2)
        stack = stack_for(model, truth, noise=0.02)
        cfg = SolveConfig(prior="pnp", iters=6, data_steps=3,
                          denoiser_cmd=" ".join(denoiser_cmd("smooth")),
                          denoiser_timeout=15.0)
        x, info = deconvolve(model, stack, cfg)
        assert np.all(np.isfinite(x))
        assert x.shape == (h, w)

    def test_denoiser_failure_propagates(self, rng):
        h, w = 12, 12
        model = SeidelConvModel.identity(h, w)
        stack = stack_for(model, smooth_image(rng, h, w))
        cfg = SolveConfig(prior="pnp", iters=3,
                          denoiser_cmd=" ".join(denoiser_cmd("quit")),
                          denoiser_timeout=10.0)
        with pytest.raises(DenoiserError):
            deconvolve(model, stack, cfg)

    def test_pnp_needs_command(self, rng):
        model = SeidelConvModel.identity(8, 8)
        stack = stack_for(model, smooth_image(rng, 8, 8))
        with pytest.raises(ValueError, match="denoiser_cmd"):
            deconvolve(model, stack, SolveConfig(prior="pnp", iters=2))

    def test_injected_client_is_not_closed(self, rng):
        h, w = 12, 12
        model = SeidelConvModel.identity(h, w)
        stack = stack_for(model, smooth_image(rng, h, w))
        with DenoiserClient(denoiser_cmd("echo"), timeout=15.0) as client:
            cfg = SolveConfig(prior="pnp", iters=2)
            deconvolve(model, stack, cfg, denoiser=client)
            assert client._proc.poll() is None   # still usable
            deconvolve(model, stack, cfg, denoiser=client)
