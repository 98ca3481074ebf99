"""Property suites over many random scenes: gradients, compositing, compensation, schedules, determinism."""

import dataclasses

import numpy as np
import pandas as pd
import pytest

from dropgs.autograd import LossSpec, finite_diff_check
from dropgs.regularizer import DropSchedule, drop_rate, sample_drop_mask
from dropgs.renderer import prepare_view, rasterize, render
from dropgs.scene_io import generate_synthetic_scene, random_check_scene
from dropgs.seeding import SCENE, RngStreams
from dropgs.train_config import RegularizerConfig, SyntheticSceneConfig, TrainConfig
from dropgs.trainer import train

from .test_renderer import _oracle_pixel


class TestGradientSuite:
    @pytest.mark.parametrize("seed", range(20))
    def test_random_scene(self, seed):
        rng = np.random.default_rng(1000 + seed)
        cloud, cam = random_check_scene(6, 32, rng, sh_degree=seed % 3)
        plan = sample_drop_mask(len(cloud), 0.3, rng) if seed % 2 else None
        weights = rng.normal(size=(32, 32, 3))
        report = finite_diff_check(cloud, cam, plan, LossSpec.weighted_sum(weights), 1e-4)
        assert report.passed(1e-3), report.to_frame().to_string()


class TestCompositingSuite:
    def test_hundred_random_cases(self):
        for seed in range(100):
            cloud, cam = random_check_scene(5, 8, np.random.default_rng(2000 + seed))
            bg = np.random.default_rng(seed).uniform(size=3)
            image = render(cloud, cam, background=bg).image
            for y in range(8):
                for x in range(8):
                    np.testing.assert_allclose(image[y, x], _oracle_pixel(cloud, cam, x, y, bg), atol=1e-9)


class TestCompensation:
    @pytest.mark.parametrize("seed", range(5))
    def test_drop_equivalence_bit_exact(self, seed):
        rng = np.random.default_rng(3000 + seed)
        cloud, cam = random_check_scene(15, 16, rng)
        plan = sample_drop_mask(15, 0.2, rng)
        survivors = cloud.subset(~plan.mask)
        batch = prepare_view(survivors, cam)
        scaled = dataclasses.replace(batch, opacity=batch.opacity * plan.compensation)
        np.testing.assert_array_equal(render(cloud, cam, plan).image, rasterize(scaled, cam).image)

    @pytest.mark.parametrize("rate", [0.1, 0.2, 0.3])
    def test_expected_opacity_preserved(self, rate):
        n, trials = 50, 100_000
        rng = np.random.default_rng(4000)
        total = np.zeros(n)
        for _ in range(trials):
            total += sample_drop_mask(n, rate, rng).multipliers()
        np.testing.assert_allclose(total / trials, 1.0, rtol=0.01)


class TestScheduleExactness:
    @pytest.mark.parametrize("gamma", [0.1, 0.2, 0.3])
    def test_progressive_endpoints(self, gamma):
        sched = DropSchedule(gamma=gamma, t_total=2000, mode="progressive")
        assert drop_rate(sched, 0) == 0.0
        assert drop_rate(sched, 1000) == gamma * 0.5
        assert drop_rate(sched, 2000) == gamma

    @pytest.mark.parametrize("gamma", [0.1, 0.2, 0.3])
    def test_fixed_constant(self, gamma):
        sched = DropSchedule(gamma=gamma, t_total=2000, mode="fixed")
        assert all(drop_rate(sched, t) == gamma for t in (0, 1, 1000, 2000))


class TestWorkerDeterminism:
    def test_train_log_independent_of_workers(self):
        cfg = TrainConfig(
            t_total=8,
            densify_interval=4,
            eval_interval=4,
            tile_size=4,
            regularizer=RegularizerConfig(kind="dropgaussian", gamma=0.2),
            synthetic=SyntheticSceneConfig(width=16, height=16, n_near=5, n_far=5, n_init_points=15, n_test=1),
        )
        bundle, _ = generate_synthetic_scene(cfg.synthetic, RngStreams(cfg.seed).get(SCENE))
        one = train(bundle, cfg.copy())
        many_cfg = cfg.copy()
        many_cfg.workers = 3
        many = train(bundle, many_cfg)
        pd.testing.assert_frame_equal(one.log.to_frame(), many.log.to_frame())
        np.testing.assert_array_equal(one.cloud.centers, many.cloud.centers)
