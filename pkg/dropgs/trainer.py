"""Training loop and evaluation.

One iteration: pick a train view (round-robin), build the drop plan for the
active regularizer, render, color loss, backward, Adam, densification
bookkeeping. Evaluation renders every view of a split with no drop plan.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .autograd import GradientSet, backward
from .camera import Camera
from .errors import InvalidParameterError, TrainingDivergedError
from .gaussians import GaussianCloud
from .losses import color_loss, psnr, ssim
from .optimizer import (
    AdamState,
    DensifyStats,
    LearningRates,
    accumulate_densify_stats,
    adam_step,
    densify_and_prune,
)
from .regularizer import (
    DropPlan,
    DropSchedule,
    drop_rate,
    l1_opacity_penalty,
    l1_rank_weights,
    sample_drop_mask,
    selective_drop_mask,
)
from .renderer import DEFAULT_TILE_SIZE, render
from .scene_io import SceneBundle, Split, init_cloud
from .seeding import DENSIFY, INIT, MASK, RngStreams
from .train_config import TrainConfig

logger = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = [
    "iter", "train_psnr", "test_psnr", "train_ssim", "test_ssim", "l1", "dssim", "n_gaussians", "r_t",
]


@dataclass(frozen=True)
class TrainRecord:
    iter: int
    train_psnr: float
    test_psnr: float
    train_ssim: float
    test_ssim: float
    l1: float
    dssim: float
    n_gaussians: int
    r_t: float
    penalty: float = 0.0       # opacity penalty of the L1 baseline; not part of the CSV


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: TrainRecord) -> None:
        if self.records and record.iter <= self.records[-1].iter:
            raise InvalidParameterError(
                f"log iterations must increase: {record.iter} after {self.records[-1].iter}"
            )
        self.records.append(record)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=TRAIN_LOG_COLUMNS)

    def to_csv(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


@dataclass(frozen=True)
class ViewMetrics:
    name: str
    psnr: float
    ssim: float


@dataclass
class EvalResult:
    split: str
    views: list[ViewMetrics]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([v.psnr for v in self.views]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([v.ssim for v in self.views]))


@dataclass(eq=False)
class TrainResult:
    cloud: GaussianCloud
    log: TrainLog
    last_grads: GradientSet | None = None
    last_camera: Camera | None = None


def evaluate(
    cloud: GaussianCloud,
    bundle: SceneBundle,
    split: Split | str,
    *,
    background: np.ndarray | tuple[float, float, float] | None = None,
    workers: int = 1,
    tile_size: int = DEFAULT_TILE_SIZE,
) -> EvalResult:
    """PSNR/SSIM of every view in ``split``, rendered with all Gaussians."""
    views = bundle.split(split)
    if not views:
        raise InvalidParameterError(f"split {Split(split).value!r} has no views")
    metrics = []
    for view in views:
        image = render(cloud, view.camera, background=background, workers=workers, tile_size=tile_size).image
        metrics.append(ViewMetrics(view.camera.name, psnr(image, view.image), ssim(image, view.image)))
    return EvalResult(split=Split(split).value, views=metrics)


def _learning_rates(cfg: TrainConfig) -> LearningRates:
    return LearningRates(
        center=cfg.lr_center,
        center_final=cfg.lr_center_final,
        opacity=cfg.lr_opacity,
        scale=cfg.lr_scale,
        rotation=cfg.lr_rotation,
        sh=cfg.lr_sh,
    )


def selection_metric(criterion: str, stats: DensifyStats, cloud: GaussianCloud, cam: Camera) -> np.ndarray:
    """Per-Gaussian input of the selective / L1 baselines: mean screen gradient or camera depth."""
    if criterion == "gradient":
        return stats.mean()
    return cam.world_to_camera(cloud.centers)[:, 2]


def train(
    bundle: SceneBundle,
    cfg: TrainConfig,
    *,
    initial_cloud: GaussianCloud | None = None,
    on_record: Callable[[TrainRecord], None] | None = None,
) -> TrainResult:
    """Optimize a cloud on the train views of ``bundle``; deterministic per ``cfg.seed``."""
    cfg.validate()
    train_views = bundle.split(Split.TRAIN)
    if not train_views:
        raise InvalidParameterError("scene has no train views")
    has_test = bool(bundle.split(Split.TEST))

    streams = RngStreams(cfg.seed)
    if initial_cloud is not None:
        cloud = initial_cloud.copy()
    else:
        cloud = init_cloud(bundle, cfg.init_strategy, cfg.init_points, streams.get(INIT), cfg.sh_degree)
    logger.info(
        "train: %d Gaussians, %d train views, %d iterations, regularizer=%s",
        len(cloud), len(train_views), cfg.t_total, cfg.regularizer.kind,
    )

    reg = cfg.regularizer
    schedule = DropSchedule(reg.gamma, cfg.t_total, reg.mode) if reg.drops else None
    state = AdamState.for_cloud(
        cloud, _learning_rates(cfg), spatial_scale=bundle.scene_extent, max_steps=cfg.t_total
    )
    stats = DensifyStats.zeros(len(cloud))
    background = np.asarray(cfg.background, dtype=np.float64)
    split_threshold = cfg.split_scale_fraction * bundle.scene_extent
    log = TrainLog()
    grads: GradientSet | None = None
    cam: Camera | None = None

    for t in range(1, cfg.t_total + 1):
        view = train_views[(t - 1) % len(train_views)]
        cam = view.camera

        r_t = 0.0
        plan: DropPlan | None = None
        if schedule is not None:
            r_t = drop_rate(schedule, t)
            if reg.kind == "dropgaussian":
                plan = sample_drop_mask(len(cloud), r_t, streams.get(MASK))
            else:
                metric = selection_metric(reg.criterion, stats, cloud, cam)
                plan = selective_drop_mask(cloud, metric, r_t, reg.criterion)

        out = render(cloud, cam, plan, background=background, workers=cfg.workers, tile_size=cfg.tile_size)
        loss, dl_dimage = color_loss(out.image, view.image, cfg.lambda_dssim)
        penalty, penalty_grad = 0.0, None
        if reg.kind == "l1":
            metric = selection_metric(reg.criterion, stats, cloud, cam)
            weights = l1_rank_weights(cloud, metric, reg.criterion)
            penalty, penalty_grad = l1_opacity_penalty(cloud, weights, reg.lambda_reg)
        objective = loss.total + penalty
        if not math.isfinite(objective):
            raise TrainingDivergedError(t, objective)

        grads = backward(out, cloud, cam, plan, dl_dimage, workers=cfg.workers)
        if penalty_grad is not None:
            grads.opacity_logits += penalty_grad

        adam_step(cloud, grads, state)
        accumulate_densify_stats(stats, grads, grads.visible)

        if t <= cfg.densify_until_iter and t % cfg.densify_interval == 0:
            result = densify_and_prune(
                cloud, stats, state,
                threshold=cfg.densify_grad_threshold,
                scale_split_threshold=split_threshold,
                min_opacity=cfg.min_opacity,
                rng=streams.get(DENSIFY),
            )
            cloud, state, stats = result.cloud, result.state, result.stats
            # Gradients of this iteration no longer align with the cloud.
            grads = None

        if cfg.eval_interval > 0 and (t % cfg.eval_interval == 0 or t == cfg.t_total):
            train_eval = evaluate(cloud, bundle, Split.TRAIN, background=background,
                                  workers=cfg.workers, tile_size=cfg.tile_size)
            if has_test:
                test_eval = evaluate(cloud, bundle, Split.TEST, background=background,
                                     workers=cfg.workers, tile_size=cfg.tile_size)
                test_psnr, test_ssim = test_eval.mean_psnr, test_eval.mean_ssim
            else:
                test_psnr = test_ssim = float("nan")
            record = TrainRecord(
                iter=t,
                train_psnr=train_eval.mean_psnr,
                test_psnr=test_psnr,
                train_ssim=train_eval.mean_ssim,
                test_ssim=test_ssim,
                l1=loss.l1,
                dssim=loss.d_ssim,
                n_gaussians=len(cloud),
                r_t=r_t,
                penalty=penalty,
            )
            log.append(record)
            logger.info(
                "iter %d: loss %.5f, train %.2f dB, test %.2f dB, %d Gaussians, r=%.3f",
                t, objective, record.train_psnr, record.test_psnr, record.n_gaussians, r_t,
            )
            if on_record is not None:
                on_record(record)

    return TrainResult(cloud=cloud, log=log, last_grads=grads, last_camera=cam)
