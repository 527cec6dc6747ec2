"""Rasterizer forward-path tests.

The brute-force reference renderer is the oracle for the tiled path; tile
binning is re-derived in-test by direct interval-overlap checks; the EWA
Jacobian is validated against central finite differences of the exact
projection map.
"""

import numpy as np
import pytest

from pointsplat.camera import CameraIntrinsics, CameraPose, RgbdFrame, project_point
from pointsplat.gaussian import from_free_params
from pointsplat.splat_render import (
    ALPHA_CLAMP,
    ALPHA_SKIP,
    LOW_PASS,
    RenderOptions,
    TRANSMITTANCE_STOP,
    bin_and_sort,
    composite_pixel,
    project_gaussian,
    project_gaussians,
    rasterize_forward,
    render_depth,
    render_reference,
)
from pointsplat.synthetic import make_test_frame, random_gaussians


def single_gaussian(mu, scale=0.05, opacity_logit=2.0, rgb=(0.8, 0.2, 0.1)):
    sh = (np.asarray(rgb) - 0.5) / 0.28209479177387814
    return from_free_params(
        mu=np.asarray(mu, dtype=float).reshape(1, 3),
        rotation=np.array([[1.0, 0.0, 0.0, 0.0]]),
        log_scale=np.full((1, 3), np.log(scale)),
        opacity_logit=np.array([opacity_logit]),
        sh_coeffs=sh.reshape(1, 1, 3),
    )


class TestProjection:
    def test_on_axis_covariance(self):
        # fx = fy = 100, center at z = 2 on the optical axis, isotropic
        # sigma = 0.1 m: J = diag(50, 50), cov2d = 25 I + 0.3 I.
        frame = RgbdFrame(
            color=np.zeros((32, 32, 3)),
            depth=np.zeros((32, 32)),
            intrinsics=CameraIntrinsics(fx=100.0, fy=100.0, cx=16.0, cy=16.0,
                                        width=32, height=32),
            pose=CameraPose(rotation=np.eye(3), translation=np.zeros(3)),
            frame_id=0,
        )
        gset = single_gaussian([0.0, 0.0, 2.0], scale=0.1)
        proj = project_gaussian(gset, 0, frame)
        assert proj is not None
        np.testing.assert_allclose(proj.mu2d[0], [16.0, 16.0], atol=1e-12)
        np.testing.assert_allclose(
            proj.cov2d[0], (25.0 + LOW_PASS) * np.eye(2), atol=1e-9
        )
        assert proj.depth[0] == pytest.approx(2.0)

    def test_behind_camera_culled(self):
        frame = make_test_frame(32, 32)
        gset = single_gaussian([0.0, 0.0, -1.0])
        assert project_gaussian(gset, 0, frame) is None

    def test_near_plane_culled(self):
        frame = make_test_frame(32, 32)
        gset = single_gaussian([0.0, 0.0, 0.005])
        assert project_gaussian(gset, 0, frame) is None

    def test_off_screen_culled(self):
        frame = make_test_frame(32, 32)
        gset = single_gaussian([50.0, 0.0, 2.0], scale=0.01)
        assert project_gaussian(gset, 0, frame) is None

    def test_jacobian_matches_finite_differences(self):
        # The EWA Jacobian linearizes (u, v) around the camera-space
        # center; compare against central differences of project_point.
        rng = np.random.default_rng(21)
        frame = make_test_frame(48, 36)
        h = 1e-5
        for _ in range(10):
            mu = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3),
                           rng.uniform(1.5, 3.0)])
            gset = single_gaussian(mu, scale=0.02)
            proj = project_gaussian(gset, 0, frame)
            assert proj is not None
            for axis in range(3):
                # Perturb in camera space = world space (identity pose).
                d = np.zeros(3)
                d[axis] = h
                up, vp, _ = project_point(mu + d, frame)
                um, vm, _ = project_point(mu - d, frame)
                fd = np.array([(up - um) / (2 * h), (vp - vm) / (2 * h)])
                ana = proj.jacobian[0][:, axis]
                np.testing.assert_allclose(ana, fd, rtol=1e-6, atol=1e-6)

    def test_radius_is_three_sigma_of_max_eigenvalue(self):
        rng = np.random.default_rng(22)
        frame = make_test_frame(32, 32)
        gset = random_gaussians(rng, 8, frame)
        proj = project_gaussians(gset, frame)
        for i in range(len(proj)):
            lam_max = np.linalg.eigvalsh(proj.cov2d[i]).max()
            assert proj.radius[i] == pytest.approx(3.0 * np.sqrt(lam_max),
                                                   rel=1e-12)

    def test_non_finite_parameter_names_index(self):
        frame = make_test_frame(16, 16)
        gset = single_gaussian([0.0, 0.0, 2.0])
        gset.mu[0, 1] = np.inf
        with pytest.raises(ValueError, match="gaussian 0"):
            project_gaussians(gset, frame)


class TestBinning:
    def test_small_gaussian_in_single_tile(self):
        frame = make_test_frame(64, 64)
        intr = frame.intrinsics
        # Screen center (24, 24): the middle of tile (1, 1).
        z = 2.0
        mu = [(24.0 - intr.cx) / intr.fx * z, (24.0 - intr.cy) / intr.fy * z, z]
        gset = single_gaussian(mu, scale=0.004)
        proj = project_gaussians(gset, frame)
        assert proj.radius[0] < 4.0
        tiles = bin_and_sort(proj, 64, 64)
        n_occupied = sum(1 for t in tiles if len(t))
        assert n_occupied == 1

    def test_full_image_gaussian_in_all_tiles(self):
        frame = make_test_frame(64, 64)
        gset = single_gaussian([0.0, 0.0, 1.2], scale=0.9)
        proj = project_gaussians(gset, frame)
        tiles = bin_and_sort(proj, 64, 64)
        assert all(len(t) == 1 for t in tiles)

    def test_membership_matches_interval_overlap_oracle(self):
        rng = np.random.default_rng(24)
        frame = make_test_frame(48, 48)
        gset = random_gaussians(rng, 40, frame, scale_range=(0.02, 0.2))
        proj = project_gaussians(gset, frame)
        ts = 16
        tiles = bin_and_sort(proj, 48, 48, ts)
        ntx = 3
        for ty in range(3):
            for tx in range(3):
                got = set(tiles[ty * ntx + tx].tolist())
                expected = set()
                for i in range(len(proj)):
                    x0, x1 = proj.mu2d[i, 0] - proj.radius[i], proj.mu2d[i, 0] + proj.radius[i]
                    y0, y1 = proj.mu2d[i, 1] - proj.radius[i], proj.mu2d[i, 1] + proj.radius[i]
                    if (x0 <= (tx + 1) * ts and x1 >= tx * ts
                            and y0 <= (ty + 1) * ts and y1 >= ty * ts):
                        expected.add(i)
                assert got == expected

    def test_tile_lists_sorted_by_depth_then_index(self):
        rng = np.random.default_rng(25)
        frame = make_test_frame(32, 32)
        gset = random_gaussians(rng, 30, frame)
        proj = project_gaussians(gset, frame)
        for tile in bin_and_sort(proj, 32, 32):
            if len(tile) < 2:
                continue
            keys = [(proj.depth[i], proj.source_index[i]) for i in tile]
            assert keys == sorted(keys)


class TestCompositePixel:
    def test_two_contributor_analytic_case(self):
        # Front alpha 0.5 red over back alpha 1 blue on black: (0.5, 0, 0.5).
        rgb, trans, _ = composite_pixel(
            colors=np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
            alphas=np.array([0.5, 1.0]),
            background=np.zeros(3),
        )
        np.testing.assert_array_equal(rgb, [0.5, 0.0, 0.5])
        assert trans == 0.0

    def test_full_opacity_gives_color_exactly(self):
        rgb, _, _ = composite_pixel(
            colors=np.array([[0.3, 0.6, 0.9]]),
            alphas=np.array([1.0]),
            background=np.ones(3),
        )
        np.testing.assert_array_equal(rgb, [0.3, 0.6, 0.9])

    def test_opaque_depth_compositing(self):
        _, _, d = composite_pixel(
            colors=np.zeros((1, 3)),
            alphas=np.array([1.0]),
            background=np.zeros(3),
            depths=np.array([2.0]),
        )
        assert d == 2.0

    def test_skip_threshold(self):
        rgb, trans, _ = composite_pixel(
            colors=np.array([[1.0, 1.0, 1.0]]),
            alphas=np.array([ALPHA_SKIP * 0.5]),
            background=np.zeros(3),
        )
        np.testing.assert_array_equal(rgb, 0.0)
        assert trans == 1.0

    def test_stop_keeps_triggering_contributor(self):
        # Second contributor drives transmittance to ~0; it is included,
        # the third is not.
        rgb, trans, _ = composite_pixel(
            colors=np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]),
            alphas=np.array([0.5, 0.9999, 0.5]),
            background=np.zeros(3),
        )
        assert rgb[2] == 0.0
        assert rgb[1] == pytest.approx(0.5 * 0.9999)
        assert trans < TRANSMITTANCE_STOP

    def test_empty_gives_background(self):
        rgb, trans, _ = composite_pixel(np.zeros((0, 3)), np.zeros(0),
                                        np.array([0.2, 0.4, 0.6]))
        np.testing.assert_array_equal(rgb, [0.2, 0.4, 0.6])
        assert trans == 1.0


class TestRasterizeForward:
    def test_center_pixel_alpha_equals_opacity(self):
        # A Gaussian centered exactly on a pixel center has G = 1 there,
        # so the pixel is o * rgb against a black background.
        frame = make_test_frame(32, 32)
        intr = frame.intrinsics
        # Place center so mu2d = (16.5, 16.5), a pixel center.
        z = 2.0
        mu = np.array([(16.5 - intr.cx) / intr.fx * z,
                       (16.5 - intr.cy) / intr.fy * z, z])
        logit = np.log(0.9 / 0.1)
        gset = single_gaussian(mu, scale=0.05, opacity_logit=logit,
                               rgb=(0.8, 0.2, 0.1))
        out = rasterize_forward(gset, frame)
        np.testing.assert_allclose(
            out.image[16, 16], 0.9 * np.array([0.8, 0.2, 0.1]), atol=1e-12
        )
        assert out.transmittance[16, 16] == pytest.approx(0.1, abs=1e-12)

    def test_two_gaussian_pixel_hand_composited(self):
        frame = make_test_frame(32, 32)
        intr = frame.intrinsics
        mus = []
        for z in (2.0, 3.0):
            mus.append([(16.5 - intr.cx) / intr.fx * z,
                        (16.5 - intr.cy) / intr.fy * z, z])
        logit = np.log(0.5 / 0.5)
        c0 = np.zeros((2, 1, 3))
        c0[0, 0] = (np.array([1.0, 0.25, 0.25]) - 0.5) / 0.28209479177387814
        c0[1, 0] = (np.array([0.25, 0.25, 1.0]) - 0.5) / 0.28209479177387814
        gset = from_free_params(
            mu=np.array(mus),
            rotation=np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]]),
            log_scale=np.full((2, 3), np.log(0.05)),
            opacity_logit=np.full(2, logit),
            sh_coeffs=c0,
        )
        out = rasterize_forward(gset, frame)
        front = np.array([1.0, 0.25, 0.25])
        back = np.array([0.25, 0.25, 1.0])
        expected = 0.5 * front + 0.5 * 0.5 * back
        np.testing.assert_allclose(out.image[16, 16], expected, atol=1e-12)

    def test_alpha_clamped_at_099(self):
        frame = make_test_frame(32, 32)
        intr = frame.intrinsics
        z = 2.0
        mu = np.array([(16.5 - intr.cx) / intr.fx * z,
                       (16.5 - intr.cy) / intr.fy * z, z])
        gset = single_gaussian(mu, scale=0.08, opacity_logit=50.0,
                               rgb=(1.0, 1.0, 1.0))
        out = rasterize_forward(gset, frame)
        assert out.image[16, 16, 0] == pytest.approx(ALPHA_CLAMP, abs=1e-12)

    def test_empty_set_gives_background(self):
        frame = make_test_frame(16, 16)
        gset = from_free_params(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
            np.zeros(0), np.zeros((0, 1, 3)),
        )
        opts = RenderOptions(background=(0.1, 0.2, 0.3))
        out = rasterize_forward(gset, frame, opts)
        np.testing.assert_allclose(out.image, np.broadcast_to([0.1, 0.2, 0.3],
                                                              (16, 16, 3)))
        np.testing.assert_array_equal(out.transmittance, 1.0)

    def test_matches_reference_on_random_scenes(self):
        for seed in range(8):
            rng = np.random.default_rng(400 + seed)
            frame = make_test_frame(32, 32)
            gset = random_gaussians(rng, 48, frame)
            out = rasterize_forward(gset, frame)
            ref, _ = render_reference(gset, frame)
            assert np.max(np.abs(out.image - ref)) <= 1e-5

    def test_float32_mode_matches_reference_loosely(self):
        rng = np.random.default_rng(55)
        frame = make_test_frame(32, 32)
        gset = random_gaussians(rng, 48, frame)
        out32 = rasterize_forward(gset, frame, RenderOptions(dtype=np.float32))
        ref, _ = render_reference(gset, frame)
        assert out32.image.dtype == np.float32
        assert np.max(np.abs(out32.image.astype(np.float64) - ref)) <= 1e-3

    def test_order_invariance_bit_identical(self):
        rng = np.random.default_rng(26)
        frame = make_test_frame(32, 32)
        gset = random_gaussians(rng, 20, frame, min_depth_gap=1e-4)
        out1 = rasterize_forward(gset, frame)
        perm = rng.permutation(20)
        shuffled = from_free_params(
            gset.mu[perm], gset.raw_rotation[perm], gset.log_scale[perm],
            gset.opacity_logit[perm], gset.sh_coeffs[perm],
        )
        out2 = rasterize_forward(shuffled, frame)
        np.testing.assert_array_equal(out1.image, out2.image)

    def test_thread_count_bit_identical(self):
        rng = np.random.default_rng(27)
        frame = make_test_frame(48, 48)
        gset = random_gaussians(rng, 40, frame)
        out1 = rasterize_forward(gset, frame, RenderOptions(threads=1))
        out4 = rasterize_forward(gset, frame, RenderOptions(threads=4))
        np.testing.assert_array_equal(out1.image, out4.image)
        np.testing.assert_array_equal(out1.transmittance, out4.transmittance)

    def test_early_stop_matches_sequential_oracle(self):
        # Stack many near-opaque Gaussians on the optical axis so the
        # transmittance stop triggers, then replay the stored traversal
        # through a hand-written sequential loop.
        n = 30
        rng = np.random.default_rng(28)
        frame = make_test_frame(24, 24)
        intr = frame.intrinsics
        zs = np.linspace(1.5, 3.0, n)
        mu = np.stack(
            [(12.5 - intr.cx) / intr.fx * zs, (12.5 - intr.cy) / intr.fy * zs, zs],
            axis=1,
        )
        gset = from_free_params(
            mu, np.tile([1.0, 0, 0, 0], (n, 1)),
            np.full((n, 3), np.log(0.08)), np.full(n, 1.5),
            rng.uniform(-0.5, 0.5, size=(n, 1, 3)),
        )
        out = rasterize_forward(gset, frame)
        sources, alphas, transmittances = out.pixel_contributors(12, 12)
        # The stop must have pruned the tail of 30 stacked Gaussians.
        assert 0 < len(sources) < n
        trans = 1.0
        for i, a in enumerate(alphas):
            assert transmittances[i] == pytest.approx(trans, rel=1e-12)
            assert a >= ALPHA_SKIP
            trans *= 1.0 - a
        assert trans < TRANSMITTANCE_STOP
        assert out.transmittance[12, 12] == pytest.approx(trans, rel=1e-12)

    def test_compositing_weights_and_transmittance_invariants(self):
        rng = np.random.default_rng(29)
        frame = make_test_frame(32, 32)
        gset = random_gaussians(rng, 64, frame, opacity_range=(0.3, 0.95))
        out = rasterize_forward(gset, frame)
        for _ in range(200):
            col = int(rng.integers(32))
            row = int(rng.integers(32))
            _, alphas, transmittances = out.pixel_contributors(col, row)
            if len(alphas) == 0:
                continue
            assert np.all(np.diff(transmittances) <= 1e-15)
            weight = float(np.sum(alphas * transmittances))
            assert -1e-12 <= weight <= 1.0 + 1e-12
            assert weight == pytest.approx(1.0 - out.transmittance[row, col],
                                           abs=1e-12)


class TestDepthRendering:
    def test_matches_reference_depth(self):
        rng = np.random.default_rng(30)
        frame = make_test_frame(32, 32)
        gset = random_gaussians(rng, 32, frame)
        depth = render_depth(gset, frame)
        _, ref_depth = render_reference(gset, frame,
                                        RenderOptions(render_depth=True))
        assert np.max(np.abs(depth - ref_depth)) <= 1e-5

    def test_empty_set_gives_zero_depth(self):
        frame = make_test_frame(16, 16)
        gset = from_free_params(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
            np.zeros(0), np.zeros((0, 1, 3)),
        )
        np.testing.assert_array_equal(render_depth(gset, frame), 0.0)

    def test_single_gaussian_depth_near_center(self):
        frame = make_test_frame(32, 32)
        intr = frame.intrinsics
        z = 2.0
        mu = np.array([(16.5 - intr.cx) / intr.fx * z,
                       (16.5 - intr.cy) / intr.fy * z, z])
        gset = single_gaussian(mu, scale=0.06, opacity_logit=4.0)
        depth = render_depth(gset, frame)
        o = 1.0 / (1.0 + np.exp(-4.0))
        assert depth[16, 16] == pytest.approx(o * 2.0, abs=1e-9)


class TestRenderReference:
    def test_single_gaussian_identical_to_tiled(self):
        frame = make_test_frame(24, 24)
        gset = single_gaussian([0.02, -0.03, 2.0], scale=0.05)
        out = rasterize_forward(gset, frame)
        ref, _ = render_reference(gset, frame)
        np.testing.assert_array_equal(out.image, ref)

    def test_empty_set_background(self):
        frame = make_test_frame(8, 8)
        gset = from_free_params(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
            np.zeros(0), np.zeros((0, 1, 3)),
        )
        ref, _ = render_reference(gset, frame, RenderOptions(background=(1, 0, 0)))
        np.testing.assert_allclose(ref, np.broadcast_to([1.0, 0, 0], (8, 8, 3)))
