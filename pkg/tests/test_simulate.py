import math

import numpy as np
import pytest

from mirrordeconv import simulate
from mirrordeconv._backend import kernels as kn
from mirrordeconv.simulate import AberrationSpec, field_sag, local_psf, make_scene


def centered_spec(**kw):
    """Spec with the optical axis on the frame center (easier geometry)."""
    base = dict(decenter_x_px=0.0, decenter_y_px=0.0,
                vignette_strength=0.0, noise_sigma=0.0)
    base.update(kw)
    return AberrationSpec(**base)


class TestFieldSag:
    def test_closed_form_value(self):
        # r = 3 mm on a 50 mm Petzval surface: 9 / 100 mm = 90 um.
        spec = centered_spec(petzval_radius_mm=50.0, pixel_pitch_um=65.0)
        shape = (401, 401)
        cx = (shape[1] - 1) / 2.0
        cy = (shape[0] - 1) / 2.0
        x = cx + 3000.0 / 65.0
        sag = field_sag(spec, cy, x, shape)
        assert np.isclose(sag, 90.0, rtol=1e-12)

    def test_zero_on_axis_and_monotone(self):
        spec = centered_spec()
        shape = (101, 101)
        xs = 50.0 + np.arange(0, 40, dtype=np.float64)
        sags = field_sag(spec, np.full_like(xs, 50.0), xs, shape)
        assert sags[0] == 0.0
        assert np.all(np.diff(sags) > 0)

    def test_flat_field_limit(self):
        spec = centered_spec(petzval_radius_mm=math.inf)
        sag = field_sag(spec, 0.0, 0.0, (64, 64))
        assert sag == 0.0

    def test_decenter_moves_apex(self):
        spec = AberrationSpec(decenter_x_px=6.0, decenter_y_px=0.0,
                              vignette_strength=0.0, noise_sigma=0.0)
        shape = (65, 65)
        at_frame_center = field_sag(spec, 32.0, 32.0, shape)
        at_axis = field_sag(spec, 32.0, 38.0, shape)
        assert at_axis == 0.0
        assert at_frame_center > 0.0


class TestLocalPsf:
    def test_normalized(self):
        spec = centered_spec()
        for pos in [(10.0, 12.0), (63.0, 79.0), (32.0, 40.0)]:
            kern, size = local_psf(spec, *pos, (64, 80), sensor_z=150.0)
            assert kern.shape == (size, size)
            assert np.isclose(kern.sum(), 1.0, atol=1e-12)

    def test_in_focus_near_delta(self):
        spec = centered_spec()
        kern, size = local_psf(spec, 31.5, 39.5, (64, 80), sensor_z=0.0)
        assert kern[size // 2, size // 2] > 0.95

    def test_doubling_f_number_halves_width(self):
        # Compare blur variance at a well-defocused corner point so the
        # sigma floor plays no role.
        shape = (128, 160)
        pos = (8.0, 10.0)
        vs = []
        for fnum in (1.0, 2.0):
            spec = centered_spec(f_number=fnum)
            kern, size = local_psf(spec, *pos, shape, sensor_z=0.0)
            dx = np.arange(size, dtype=np.float64) - size // 2
            gx, gy = np.meshgrid(dx, dx)
            vs.append((kern * gx ** 2).sum() + (kern * gy ** 2).sum())
        assert np.isclose(vs[1], vs[0] / 4.0, rtol=0.05)

    def test_defocus_grows_away_from_sag_surface(self):
        spec = centered_spec()
        shape = (128, 160)
        pos = (20.0, 20.0)
        sag = float(field_sag(spec, *pos, shape))
        widths = []
        for z in (sag, sag + 150.0, sag + 300.0):
            kern, size = local_psf(spec, *pos, shape, sensor_z=z)
            widths.append(size)
        assert widths[0] < widths[1] < widths[2]


def naive_scatter_blur(img, pxx, pxy, pyy, rad):
    """Scatter-form reference: every replicate-padded source distributes
    a unit-normalized truncated Gaussian; light landing outside the
    frame is lost."""
    h, w = img.shape
    pad = np.pad(img, rad, mode="edge")
    ppxx = np.pad(pxx, rad, mode="edge")
    ppxy = np.pad(pxy, rad, mode="edge")
    ppyy = np.pad(pyy, rad, mode="edge")
    out = np.zeros((h + 2 * rad, w + 2 * rad))
    for sy in range(h + 2 * rad):
        for sx in range(w + 2 * rad):
            weights = np.zeros((2 * rad + 1, 2 * rad + 1))
            for dy in range(-rad, rad + 1):
                for dx in range(-rad, rad + 1):
                    weights[dy + rad, dx + rad] = math.exp(
                        -0.5 * (ppxx[sy, sx] * dx * dx
                                + 2.0 * ppxy[sy, sx] * dx * dy
                                + ppyy[sy, sx] * dy * dy))
            weights /= weights.sum()
            y0 = max(sy - rad, 0)
            y1 = min(sy + rad + 1, h + 2 * rad)
            x0 = max(sx - rad, 0)
            x1 = min(sx + rad + 1, w + 2 * rad)
            out[y0:y1, x0:x1] += pad[sy, sx] * weights[
                y0 - sy + rad:y1 - sy + rad, x0 - sx + rad:x1 - sx + rad]
    return out[rad:rad + h, rad:rad + w]


class TestRendering:
    def test_gather_matches_scatter_oracle(self):
        rng = np.random.default_rng(5)
        h, w = 12, 14
        rad = 3
        img = rng.random((h, w))
        sig = 0.5 + 1.5 * rng.random((h, w))
        pxx = 1.0 / sig ** 2
        pyy = 1.0 / np.flipud(sig) ** 2
        pxy = np.zeros((h, w))
        znorm = kn.gauss_norm(pxx, pxy, pyy, rad)
        got = kn.sv_blur_gather(np.ascontiguousarray(img), pxx, pxy, pyy,
                                znorm, rad)
        want = naive_scatter_blur(img, pxx, pxy, pyy, rad)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_aberration_free_slice_is_identity(self):
        spec = centered_spec(petzval_radius_mm=math.inf, coma_coeff=0.0,
                             astig_coeff=0.0)
        truth = make_scene(48, 56, seed=3)
        out = simulate.render_slice(truth, spec, sensor_z=0.0)
        rmse = np.sqrt(np.mean((out - truth) ** 2))
        assert rmse < 1e-6

    def test_energy_conserved_on_tapered_scene(self):
        spec = centered_spec()
        truth = make_scene(96, 128, seed=11)
        stack, _ = simulate.render_stack(truth, spec, z0=0.0, dz=200.0, n=3,
                                         seed=0)
        for k in range(3):
            ratio = stack.slice(k).sum() / truth.sum()
            assert abs(ratio - 1.0) < 0.01

    def test_deterministic(self):
        spec = AberrationSpec()
        truth = make_scene(64, 80, seed=2)
        a, _ = simulate.render_stack(truth, spec, z0=0.0, dz=200.0, n=2, seed=9)
        b, _ = simulate.render_stack(truth, spec, z0=0.0, dz=200.0, n=2, seed=9)
        assert np.array_equal(a.data, b.data)

    def test_noise_follows_seed(self):
        spec = AberrationSpec()
        truth = make_scene(32, 32, seed=2)
        a, _ = simulate.render_stack(truth, spec, z0=0.0, dz=100.0, n=1, seed=1)
        b, _ = simulate.render_stack(truth, spec, z0=0.0, dz=100.0, n=1, seed=2)
        assert not np.array_equal(a.data, b.data)

    def test_corrected_flag(self):
        truth = make_scene(32, 32, seed=2)
        clean, _ = simulate.render_stack(truth, centered_spec(), 0.0, 100.0, 1)
        dirty, _ = simulate.render_stack(truth, AberrationSpec(), 0.0, 100.0, 1)
        noisy, _ = simulate.render_stack(
            truth, centered_spec(noise_sigma=0.01), 0.0, 100.0, 1)
        assert clean.corrected and not dirty.corrected
        assert noisy.corrected      # noise is not a radiometric defect

    def test_focus_ring_radius_grows_with_z(self):
        # The sharpest radius of slice k should sit near the field ring
        # whose sag equals the slice position: r = sqrt(2 * Rp * z).
        spec = centered_spec()
        truth = make_scene(128, 160, seed=4)
        _, aux = simulate.render_stack(truth, spec, z0=0.0, dz=200.0, n=3)
        h, w = truth.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        r = np.hypot(xx - (w - 1) / 2, yy - (h - 1) / 2)
        best = []
        for k in range(3):
            sig = aux["sigma_maps"][k]
            bins = np.arange(0.0, r.max() + 4.0, 4.0)
            prof = [sig[(r >= b) & (r < b + 4.0)].mean() for b in bins[:-1]]
            best.append(bins[int(np.argmin(prof))] + 2.0)
        assert best[0] < best[1] < best[2]
        for k, z in enumerate([0.0, 200.0, 400.0]):
            expect = math.sqrt(2.0 * 50.0 * z * 1e-3) * 1000.0 / 65.0
            assert abs(best[k] - expect) <= 8.0


class TestFrames:
    def test_vignetting_shape_and_depth(self):
        spec = AberrationSpec()
        v0 = simulate.vignetting_frame(spec, 0.0, (64, 80))
        v4 = simulate.vignetting_frame(spec, 400.0, (64, 80))
        assert v0.max() <= 1.0 and v0.min() >= 0.05
        assert v4[0, 0] < v0[0, 0]          # deeper falloff farther out
        ax, ay = spec.axis_center((64, 80))
        assert v0[int(round(ay)), int(round(ax))] > 0.99

    def test_offset_frame(self):
        off = simulate.offset_frame((24, 30), level=0.02)
        assert off.shape == (24, 30)
        assert off.min() >= 0.02 and off.max() <= 0.025 + 1e-12

    def test_vignetting_disabled(self):
        v = simulate.vignetting_frame(centered_spec(), 300.0, (32, 32))
        assert np.array_equal(v, np.ones((32, 32)))


class TestScene:
    def test_range_and_determinism(self):
        a = make_scene(60, 70, seed=8)
        b = make_scene(60, 70, seed=8)
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_border_is_dark(self):
        s = make_scene(80, 100, seed=8)
        border = np.concatenate([s[0], s[-1], s[:, 0], s[:, -1]])
        assert border.mean() < 0.05

    def test_bars_kind(self):
        s = make_scene(40, 200, seed=0, kind="bars")
        assert s.shape == (40, 200)
        assert s.std() > 0.1

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown scene kind"):
            make_scene(10, 10, kind="swirl")


class TestSpecValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            AberrationSpec(f_number=0.0)
        with pytest.raises(ValueError):
            AberrationSpec(noise_sigma=-0.1)
        with pytest.raises(ValueError):
            AberrationSpec(pixel_pitch_um=0.0)

    def test_petzval_defaults_to_focal_length(self):
        assert AberrationSpec().petzval_mm == 50.0
        assert AberrationSpec(petzval_radius_mm=75.0).petzval_mm == 75.0
