"""Tests for the tile rasterizer: compositing, ordering, drop plans and determinism."""

import dataclasses

import numpy as np
import pytest

from dropgs.camera import Camera
from dropgs.errors import InvalidParameterError
from dropgs.gaussians import GaussianCloud, Splat2D, eval_sh, project_gaussian
from dropgs.regularizer import DropPlan, sample_drop_mask
from dropgs.renderer import (
    ALPHA_MAX,
    CUTOFF_SIGMA,
    composite_pixel,
    depth_sort,
    prepare_view,
    rasterize,
    render,
)
from dropgs.scene_io import random_check_scene


@pytest.fixture
def scene():
    return random_check_scene(5, 8, np.random.default_rng(21), sh_degree=1)


def _oracle_pixel(cloud: GaussianCloud, cam: Camera, x: int, y: int, background) -> np.ndarray:
    """Straight per-pixel evaluation: project, sort, evaluate, composite."""
    p = np.array([x + 0.5, y + 0.5])
    items = []
    for i in range(len(cloud)):
        g = cloud.gaussian(i)
        splat = project_gaussian(g, cam)
        if splat is None:
            continue
        d = p - splat.mean2d
        inv = np.linalg.inv(splat.cov2d)
        radius = CUTOFF_SIGMA * np.sqrt(np.linalg.eigvalsh(splat.cov2d).max())
        alpha = 0.0
        if d @ d <= radius * radius:
            alpha = g.opacity * np.exp(-0.5 * d @ inv @ d)
        view_dir = g.center - cam.center
        color = eval_sh(g.sh_coeffs, view_dir / np.linalg.norm(view_dir))
        items.append((splat.depth, color, alpha))
    items.sort(key=lambda e: e[0])
    color, _ = composite_pixel([(c, a) for _, c, a in items], background)
    return color


class TestCompositePixel:
    def test_empty_is_background(self):
        bg = np.array([0.2, 0.3, 0.4])
        color, trans = composite_pixel([], bg)
        np.testing.assert_array_equal(color, bg)
        assert trans == 1.0

    def test_two_half_alphas(self):
        c1, c2, bg = np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])
        color, trans = composite_pixel([(c1, 0.5), (c2, 0.5)], bg)
        np.testing.assert_allclose(color, 0.5 * c1 + 0.25 * c2 + 0.25 * bg)
        assert trans == pytest.approx(0.25)

    def test_alpha_clamped(self):
        c, bg = np.array([1.0, 0.5, 0.0]), np.array([0.0, 1.0, 1.0])
        color, trans = composite_pixel([(c, 1.0)], bg)
        np.testing.assert_allclose(color, 0.99 * c + 0.01 * bg)
        assert trans == pytest.approx(1.0 - ALPHA_MAX)

    def test_early_stop(self):
        # Three opaque black layers leave T ~ 1e-6; the white one behind is never blended.
        entries = [(np.zeros(3), 0.99)] * 3 + [(np.ones(3), 0.99)]
        color, trans = composite_pixel(entries, np.zeros(3))
        assert trans == pytest.approx(1e-6)
        np.testing.assert_array_equal(color, 0.0)


class TestDepthSort:
    def test_order(self):
        splats = [Splat2D(np.zeros(2), np.eye(2), d, np.zeros(3)) for d in (3.0, 1.0, 2.0)]
        np.testing.assert_array_equal(depth_sort(splats), [1, 2, 0])

    def test_ties_keep_input_order(self):
        np.testing.assert_array_equal(depth_sort(np.array([1.0, 1.0])), [0, 1])
        np.testing.assert_array_equal(depth_sort(np.array([2.0, 1.0, 2.0, 1.0])), [1, 3, 0, 2])

    def test_matches_reference_sort(self):
        depths = np.random.default_rng(0).uniform(0.1, 10.0, size=1000)
        expected = sorted(range(1000), key=lambda i: (depths[i], i))
        np.testing.assert_array_equal(depth_sort(depths), expected)


class TestRender:
    def test_matches_per_pixel_oracle(self, scene):
        cloud, cam = scene
        bg = np.array([0.1, 0.2, 0.3])
        out = render(cloud, cam, background=bg)
        for y in range(cam.height):
            for x in range(cam.width):
                np.testing.assert_allclose(out.image[y, x], _oracle_pixel(cloud, cam, x, y, bg), atol=1e-9)

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_oracle_random_scenes(self, seed):
        cloud, cam = random_check_scene(5, 8, np.random.default_rng(seed), sh_degree=2)
        out = render(cloud, cam)
        for y in range(cam.height):
            for x in range(cam.width):
                np.testing.assert_allclose(out.image[y, x], _oracle_pixel(cloud, cam, x, y, np.zeros(3)), atol=1e-9)

    def test_centered_gaussian_peaks_at_center_pixel(self):
        cam = Camera.look_at(np.array([0.0, 0.0, -3.0]), np.zeros(3), np.array([0.0, -1.0, 0.0]),
                             width=9, height=9, fov_x_deg=40.0)
        cloud = GaussianCloud(
            centers=np.zeros((1, 3)),
            log_scales=np.full((1, 3), np.log(0.2)),
            rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
            opacity_logits=np.array([0.0]),
            sh_coeffs=np.zeros((1, 3, 1)),
        )
        out = render(cloud, cam)
        alphas = np.zeros((9, 9))
        for y in range(9):
            for x in range(9):
                for _, a, _ in out.pixel_log(x, y):
                    alphas[y, x] = a
        peak = np.unravel_index(np.argmax(alphas), alphas.shape)
        assert peak == (4, 4)
        assert np.sum(alphas == alphas[4, 4]) == 1

    def test_empty_cloud_is_background(self, scene):
        _, cam = scene
        bg = np.array([0.5, 0.25, 1.0])
        out = render(GaussianCloud.empty(1), cam, background=bg)
        np.testing.assert_array_equal(out.image, np.broadcast_to(bg, out.image.shape))
        np.testing.assert_array_equal(out.final_transmittance, 1.0)

    def test_all_behind_camera_is_background(self, scene):
        cloud, cam = scene
        behind = cloud.copy()
        behind.centers[:] = cam.center - 2.0 * (cloud.centers.mean(axis=0) - cam.center)
        out = render(behind, cam)
        np.testing.assert_array_equal(out.image, 0.0)

    def test_zero_resolution_rejected(self):
        cam = Camera(np.array([10.0, 10.0]), np.zeros(2), (0, 8), np.eye(3), np.zeros(3))
        with pytest.raises(InvalidParameterError):
            render(GaussianCloud.empty(0), cam)

    def test_dropping_everything_gives_background(self, scene):
        cloud, cam = scene
        # round(0.96 * 10) = 10
        big = cloud.concat(cloud)
        plan = DropPlan(mask=np.ones(10, dtype=bool), rate=0.96)
        bg = np.array([0.3, 0.3, 0.3])
        out = render(big, cam, plan, background=bg)
        np.testing.assert_array_equal(out.image, np.broadcast_to(bg, out.image.shape))
        np.testing.assert_array_equal(out.final_transmittance, 1.0)

    def test_drop_matches_subset_with_scaled_opacity(self):
        cloud, cam = random_check_scene(10, 8, np.random.default_rng(5))
        plan = sample_drop_mask(10, 0.3, np.random.default_rng(6))
        dropped = render(cloud, cam, plan)

        survivors = cloud.subset(~plan.mask)
        batch = prepare_view(survivors, cam)
        scaled = dataclasses.replace(batch, opacity=batch.opacity * plan.compensation)
        reference = rasterize(scaled, cam)
        np.testing.assert_array_equal(dropped.image, reference.image)

    def test_plan_size_mismatch(self, scene):
        cloud, cam = scene
        with pytest.raises(InvalidParameterError):
            render(cloud, cam, DropPlan.none(len(cloud) + 1))

    def test_worker_count_bit_identical(self):
        cloud, cam = random_check_scene(20, 24, np.random.default_rng(8))
        one = render(cloud, cam, workers=1, tile_size=4)
        four = render(cloud, cam, workers=4, tile_size=4)
        np.testing.assert_array_equal(one.image, four.image)
        np.testing.assert_array_equal(one.final_transmittance, four.final_transmittance)

    def test_input_order_invariance(self):
        cloud, cam = random_check_scene(12, 16, np.random.default_rng(9))
        perm = np.random.default_rng(10).permutation(len(cloud))
        a = render(cloud, cam).image
        b = render(cloud.subset(perm), cam).image
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_pixel_log_invariants(self):
        cloud, cam = random_check_scene(15, 12, np.random.default_rng(11))
        out = render(cloud, cam, tile_size=5)
        depth = {int(i): d for i, d in zip(out.batch.index, out.batch.depth)}
        for y in range(cam.height):
            for x in range(cam.width):
                entries = out.pixel_log(x, y)
                depths = [depth[i] for i, _, _ in entries]
                assert depths == sorted(depths)
                trans = [t for _, _, t in entries]
                assert all(a >= b for a, b in zip(trans, trans[1:]))
                assert all(0.0 < a <= ALPHA_MAX for _, a, _ in entries)
                expected_final = np.prod([1.0 - a for _, a, _ in entries]) if entries else 1.0
                assert out.final_transmittance[y, x] == pytest.approx(expected_final, rel=1e-12)

    def test_pixel_log_out_of_bounds(self, scene):
        cloud, cam = scene
        out = render(cloud, cam)
        with pytest.raises(InvalidParameterError):
            out.pixel_log(cam.width, 0)
        with pytest.raises(InvalidParameterError):
            out.pixel_log(0, cam.height)

    @pytest.mark.parametrize("tile_size", [1, 3, 8, 64])
    def test_tile_size_does_not_change_image(self, tile_size):
        cloud, cam = random_check_scene(25, 20, np.random.default_rng(12))
        reference = render(cloud, cam, tile_size=20)
        tiled = render(cloud, cam, tile_size=tile_size)
        np.testing.assert_allclose(tiled.image, reference.image, rtol=0, atol=1e-12)
        np.testing.assert_allclose(tiled.final_transmittance, reference.final_transmittance, rtol=0, atol=1e-12)

    def test_tiles_hold_only_overlapping_splats(self):
        cloud, cam = random_check_scene(25, 32, np.random.default_rng(13))
        out = render(cloud, cam, tile_size=8)
        batch = out.batch
        for tile in out.contribution_log.tiles:
            for k in tile.splats:
                mx, my = batch.mean2d[k]
                r = batch.radius[k]
                assert mx + r >= tile.x0 + 0.5 and mx - r <= tile.x1 - 0.5
                assert my + r >= tile.y0 + 0.5 and my - r <= tile.y1 - 0.5


class TestRenderInvariants:
    @pytest.mark.parametrize("seed", range(5))
    def test_energy_bound(self, seed):
        rng = np.random.default_rng(300 + seed)
        cloud, cam = random_check_scene(12, 16, rng, sh_degree=0)
        # DC-only colors 0.5 + Y0 * f stay inside [0, 1] for |f| <= 1.7.
        cloud.sh_coeffs[:] = rng.uniform(-1.7, 1.7, size=cloud.sh_coeffs.shape)
        cloud.opacity_logits[:] = rng.uniform(-2.0, 6.0, size=len(cloud))
        out = render(cloud, cam, background=np.zeros(3))
        assert out.image.min() >= 0.0
        assert out.image.max() <= 1.0
        assert ((out.final_transmittance >= 0.0) & (out.final_transmittance <= 1.0)).all()

    @pytest.mark.parametrize("seed", range(5))
    def test_occlusion_monotonicity(self, seed):
        rng = np.random.default_rng(400 + seed)
        cloud, cam = random_check_scene(5, 16, rng)
        # Opacities <= 0.5 keep every pixel above the early-stop transmittance.
        cloud.opacity_logits[:] = rng.uniform(-3.0, -1.0, size=len(cloud))
        before = render(cloud, cam)
        covered = [(x, y) for y in range(16) for x in range(16) if before.pixel_log(x, y)]
        x, y = covered[len(covered) // 2]
        front = before.pixel_log(x, y)[0][0]
        raised = cloud.copy()
        raised.opacity_logits[front] = 0.0
        after = render(raised, cam)
        assert (after.final_transmittance <= before.final_transmittance).all()
        assert after.final_transmittance[y, x] < before.final_transmittance[y, x]

    def test_zero_rate_plan_matches_no_plan(self):
        cloud, cam = random_check_scene(15, 16, np.random.default_rng(14))
        bg = np.array([0.2, 0.4, 0.6])
        plain = render(cloud, cam, background=bg)
        planned = render(cloud, cam, DropPlan.none(len(cloud)), background=bg)
        np.testing.assert_array_equal(planned.image, plain.image)
        np.testing.assert_array_equal(planned.final_transmittance, plain.final_transmittance)
        assert planned.branch_signature() == plain.branch_signature()
