"""Tests for the training loop, evaluation and the training log."""

import math

import numpy as np
import pandas as pd
import pytest

from dropgs.camera import Camera
from dropgs.errors import InvalidParameterError, TrainingDivergedError
from dropgs.gaussians import GaussianCloud, rgb_to_sh_dc
from dropgs.losses import PSNR_CAP, psnr
from dropgs.renderer import render
from dropgs.scene_io import SceneBundle, SceneView, Split, generate_synthetic_scene, init_cloud
from dropgs.seeding import INIT, SCENE, RngStreams
from dropgs.train_config import RegularizerConfig, SyntheticSceneConfig, TrainConfig
from dropgs.trainer import TRAIN_LOG_COLUMNS, TrainLog, TrainRecord, evaluate, train


def _small_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(
        t_total=20,
        densify_interval=10,
        eval_interval=10,
        init_strategy="from_points",
        synthetic=SyntheticSceneConfig(width=16, height=16, n_near=6, n_far=6, n_init_points=20, n_test=2),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def _scene(cfg: TrainConfig):
    return generate_synthetic_scene(cfg.synthetic, RngStreams(cfg.seed).get(SCENE))


def _single_gaussian_bundle():
    cloud = GaussianCloud(
        centers=np.zeros((1, 3)),
        log_scales=np.full((1, 3), math.log(0.3)),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        opacity_logits=np.array([1.0]),
        sh_coeffs=rgb_to_sh_dc(np.array([0.8, 0.4, 0.2])).reshape(1, 3, 1),
    )
    views = []
    for i, theta in enumerate(np.deg2rad([-20.0, 0.0, 20.0, 10.0])):
        eye = 3.0 * np.array([np.sin(theta), 0.0, -np.cos(theta)])
        cam = Camera.look_at(eye, np.zeros(3), np.array([0.0, -1.0, 0.0]), width=16, height=16, fov_x_deg=40.0)
        views.append(SceneView(cam, render(cloud, cam).image, Split.TEST if i == 3 else Split.TRAIN))
    return SceneBundle(views=views, scene_extent=1.0), cloud


class TestTrain:
    def test_zero_iterations_returns_initial_cloud(self):
        cfg = _small_config(t_total=0)
        bundle, _ = _scene(cfg)
        result = train(bundle, cfg)
        expected = init_cloud(bundle, cfg.init_strategy, cfg.init_points, RngStreams(cfg.seed).get(INIT), cfg.sh_degree)
        assert len(result.log) == 0
        np.testing.assert_array_equal(result.cloud.centers, expected.centers)
        np.testing.assert_array_equal(result.cloud.log_scales, expected.log_scales)

    def test_seed_determinism(self):
        cfg = _small_config(regularizer=RegularizerConfig(kind="dropgaussian", gamma=0.2))
        bundle, _ = _scene(cfg)
        a = train(bundle, cfg.copy()).log.to_frame()
        b = train(bundle, cfg.copy()).log.to_frame()
        pd.testing.assert_frame_equal(a, b)

    def test_zero_gamma_matches_no_regularizer(self):
        cfg = _small_config()
        bundle, _ = _scene(cfg)
        plain = train(bundle, cfg.copy())
        dropping = cfg.copy()
        dropping.regularizer = RegularizerConfig(kind="dropgaussian", gamma=0.0)
        dropped = train(bundle, dropping)
        pd.testing.assert_frame_equal(plain.log.to_frame(), dropped.log.to_frame())
        np.testing.assert_array_equal(plain.cloud.centers, dropped.cloud.centers)

    def test_log_rows_and_rates(self):
        cfg = _small_config(regularizer=RegularizerConfig(kind="dropgaussian", gamma=0.2, mode="progressive"))
        bundle, _ = _scene(cfg)
        seen = []
        result = train(bundle, cfg, on_record=seen.append)
        frame = result.log.to_frame()
        assert list(frame.columns) == TRAIN_LOG_COLUMNS
        assert frame["iter"].tolist() == [10, 20]
        assert frame["r_t"].tolist() == [pytest.approx(0.1), 0.2]
        assert len(seen) == 2
        assert frame["n_gaussians"].iloc[-1] == len(result.cloud)

    @pytest.mark.parametrize(
        "reg",
        [
            RegularizerConfig(kind="dropgaussian", gamma=0.3, mode="fixed"),
            RegularizerConfig(kind="selective", gamma=0.2, criterion="gradient"),
            RegularizerConfig(kind="selective", gamma=0.2, criterion="distance"),
            RegularizerConfig(kind="l1", criterion="gradient", lambda_reg=1e-2),
            RegularizerConfig(kind="l1", criterion="distance", lambda_reg=1e-2),
        ],
    )
    def test_every_regularizer_runs(self, reg):
        cfg = _small_config(regularizer=reg)
        bundle, _ = _scene(cfg)
        result = train(bundle, cfg)
        frame = result.log.to_frame()
        assert len(frame) == 2
        assert np.isfinite(frame["train_psnr"]).all()
        assert result.last_grads is None or len(result.last_grads) == len(result.cloud)

    def test_l1_penalty_is_part_of_the_objective(self):
        cfg = _small_config(regularizer=RegularizerConfig(kind="l1", criterion="distance", lambda_reg=0.5))
        bundle, _ = _scene(cfg)
        records = train(bundle, cfg).log.records
        assert all(r.penalty > 0.0 for r in records)
        assert list(TrainLog(records).to_frame().columns) == TRAIN_LOG_COLUMNS

        plain = _small_config()
        assert all(r.penalty == 0.0 for r in train(bundle, plain).log.records)

    def test_non_finite_penalty_diverges(self):
        cfg = _small_config(regularizer=RegularizerConfig(kind="l1", criterion="distance", lambda_reg=math.inf))
        bundle, _ = _scene(cfg)
        with pytest.raises(TrainingDivergedError) as err:
            train(bundle, cfg)
        assert err.value.iteration == 1

    def test_training_improves_fit(self):
        cfg = _small_config(t_total=60, eval_interval=60, densify_interval=1000, init_strategy="random", init_points=40)
        cfg.lr_sh = cfg.lr_opacity = 0.05
        bundle, _ = _scene(cfg)
        start = init_cloud(bundle, "random", 40, RngStreams(cfg.seed).get(INIT), cfg.sh_degree)
        before = evaluate(start, bundle, Split.TRAIN).mean_psnr
        after = train(bundle, cfg).log.records[-1].train_psnr
        assert after > before

    def test_fixed_point_refit(self):
        bundle, truth = _single_gaussian_bundle()
        cfg = TrainConfig(t_total=200, eval_interval=200, sh_degree=0)
        result = train(bundle, cfg, initial_cloud=truth)
        assert result.log.records[-1].train_psnr == PSNR_CAP

    def test_no_train_views(self):
        bundle, _ = _single_gaussian_bundle()
        test_only = SceneBundle(views=bundle.split(Split.TEST), scene_extent=1.0)
        with pytest.raises(InvalidParameterError):
            train(test_only, TrainConfig(t_total=1, init_strategy="random", init_points=5))

    def test_without_test_split_metrics_are_nan(self):
        bundle, truth = _single_gaussian_bundle()
        train_only = SceneBundle(views=bundle.split(Split.TRAIN), scene_extent=1.0)
        result = train(train_only, TrainConfig(t_total=2, eval_interval=1, sh_degree=0), initial_cloud=truth)
        assert math.isnan(result.log.records[-1].test_psnr)


class TestEvaluate:
    def test_ground_truth_is_cap(self):
        bundle, truth = _single_gaussian_bundle()
        assert evaluate(truth, bundle, Split.TRAIN).mean_psnr == PSNR_CAP

    def test_single_view_split(self):
        bundle, truth = _single_gaussian_bundle()
        shifted = truth.copy()
        shifted.centers[0, 0] += 0.1
        result = evaluate(shifted, bundle, "test")
        assert len(result.views) == 1
        assert result.mean_psnr == result.views[0].psnr

    def test_empty_cloud_matches_background(self):
        bundle, _ = _single_gaussian_bundle()
        bg = (0.2, 0.3, 0.4)
        result = evaluate(GaussianCloud.empty(0), bundle, Split.TEST, background=bg)
        target = bundle.split(Split.TEST)[0].image
        expected = psnr(np.broadcast_to(np.array(bg), target.shape), target)
        assert result.mean_psnr == pytest.approx(expected, rel=1e-12)

    def test_empty_split(self):
        bundle, _ = _single_gaussian_bundle()
        train_only = SceneBundle(views=bundle.split(Split.TRAIN), scene_extent=1.0)
        with pytest.raises(InvalidParameterError):
            evaluate(GaussianCloud.empty(0), train_only, Split.TEST)


class TestTrainLog:
    def _record(self, it):
        return TrainRecord(it, 20.0, 18.0, 0.8, 0.7, 0.05, 0.1, 100, 0.1)

    def test_iterations_must_increase(self):
        log = TrainLog()
        log.append(self._record(10))
        with pytest.raises(InvalidParameterError):
            log.append(self._record(10))

    def test_csv_header(self, tmp_path):
        log = TrainLog()
        log.append(self._record(1))
        path = tmp_path / "train_log.csv"
        log.to_csv(path)
        assert path.read_text().splitlines()[0] == ",".join(TRAIN_LOG_COLUMNS)
        assert pd.read_csv(path)["test_psnr"].iloc[0] == 18.0
