"""Reverse-mode gradients of an image loss with respect to every Gaussian parameter.

The backward pass replays the per-tile ``TileRecord`` kept by the forward pass,
so it sees exactly the splats, alphas and transmittances that produced the
image. Per-tile partial sums are combined in tile order, which keeps gradients
bit-identical across worker counts.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .camera import Camera
from .errors import InvalidParameterError
from .gaussians import (
    PARAM_FIELDS,
    GaussianCloud,
    project_cloud,
    quat_rotation_jacobian,
    quat_to_rotation,
    sh_basis,
    sh_basis_grad,
)
from .losses import DEFAULT_LAMBDA, color_loss
from .regularizer import DropPlan
from .renderer import RenderOutput, TileRecord, render

logger = logging.getLogger(__name__)


# ──────────────────────────────────────────────────────────────────────
# Gradient containers
# ──────────────────────────────────────────────────────────────────────


@dataclass(eq=False)
class SplatGradients:
    """dL with respect to the per-splat quantities of a ViewBatch."""

    color: np.ndarray      # (K, 3) clamped color
    opacity: np.ndarray    # (K,) effective (compensated) opacity
    mean2d: np.ndarray     # (K, 2)
    conic: np.ndarray      # (K, 3) d/da, d/db, d/dc of the inverse covariance

    @classmethod
    def zeros(cls, k: int) -> SplatGradients:
        return cls(np.zeros((k, 3)), np.zeros(k), np.zeros((k, 2)), np.zeros((k, 3)))


@dataclass(eq=False)
class GradientSet:
    """Per-Gaussian gradients, row-aligned with the GaussianCloud they came from."""

    centers: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    screen_grad: np.ndarray = field(default_factory=lambda: np.zeros(0))   # densification statistic
    visible: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> GradientSet:
        n = len(cloud)
        return cls(
            **{name: np.zeros_like(getattr(cloud, name)) for name in PARAM_FIELDS},
            screen_grad=np.zeros(n),
            visible=np.zeros(n, dtype=bool),
        )

    def __len__(self) -> int:
        return self.centers.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for a in self.arrays().values())


# ──────────────────────────────────────────────────────────────────────
# Compositing backward
# ──────────────────────────────────────────────────────────────────────


def _backward_tile(out: RenderOutput, tile: TileRecord, dl_dimage: np.ndarray) -> SplatGradients:
    batch = out.batch
    sel = tile.splats
    k = sel.shape[0]
    if k == 0:
        return SplatGradients.zeros(0)
    grad = dl_dimage[tile.y0 : tile.y1, tile.x0 : tile.x1].reshape(-1, 3)   # (P, 3)

    weight = tile.alpha * tile.trans                            # (K, P)
    d_color = np.einsum("kp,pc->kc", weight, grad)
    cg = np.einsum("kc,pc->kp", batch.color[sel], grad)         # c_i . dL/dC(p)
    contrib = weight * cg
    after = np.zeros_like(contrib)
    after[:-1] = np.cumsum(contrib[::-1], axis=0)[::-1][1:]
    bg_term = tile.final_trans * (grad @ out.background)
    d_alpha = tile.trans * cg - (after + bg_term[None, :]) / (1.0 - tile.alpha)
    d_alpha = np.where(tile.blended & ~tile.clamped, d_alpha, 0.0)

    d_opacity = (d_alpha * tile.gauss).sum(axis=1)
    d_power = d_alpha * batch.opacity[sel, None] * tile.gauss
    ca, cb, cc = (batch.conic[sel, i][:, None] for i in range(3))
    dx, dy = tile.dx, tile.dy
    # d power / d mean = Q (p - mean)
    d_mean = np.stack(
        [(d_power * (ca * dx + cb * dy)).sum(axis=1), (d_power * (cb * dx + cc * dy)).sum(axis=1)],
        axis=-1,
    )
    d_conic = np.stack(
        [
            (d_power * (-0.5 * dx * dx)).sum(axis=1),
            (d_power * (-dx * dy)).sum(axis=1),
            (d_power * (-0.5 * dy * dy)).sum(axis=1),
        ],
        axis=-1,
    )
    return SplatGradients(color=d_color, opacity=d_opacity, mean2d=d_mean, conic=d_conic)


def backward_splats(out: RenderOutput, dl_dimage: np.ndarray, *, workers: int = 1) -> SplatGradients:
    """Gradients with respect to the per-splat color, opacity, 2D mean and conic."""
    tiles = out.contribution_log.tiles
    if workers > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda t: _backward_tile(out, t, dl_dimage), tiles))
    else:
        parts = [_backward_tile(out, t, dl_dimage) for t in tiles]

    acc = SplatGradients.zeros(len(out.batch))
    for tile, part in zip(tiles, parts):
        if tile.splats.size == 0:
            continue
        acc.color[tile.splats] += part.color
        acc.opacity[tile.splats] += part.opacity
        acc.mean2d[tile.splats] += part.mean2d
        acc.conic[tile.splats] += part.conic
    return acc


# ──────────────────────────────────────────────────────────────────────
# Parameter chain
# ──────────────────────────────────────────────────────────────────────


def backward(
    out: RenderOutput,
    cloud: GaussianCloud,
    cam: Camera,
    plan: DropPlan | None,
    dl_dimage: np.ndarray,
    *,
    workers: int = 1,
) -> GradientSet:
    """dL/dtheta for every parameter of ``cloud`` given dL/dimage.

    ``out`` must come from ``render(cloud, cam, plan)``. Dropped and culled
    Gaussians get exactly zero gradient.
    """
    dl_dimage = np.asarray(dl_dimage, dtype=np.float64)
    if dl_dimage.shape != out.image.shape:
        raise InvalidParameterError(f"dL/dimage has shape {dl_dimage.shape}, image is {out.image.shape}")
    batch = out.batch
    if batch.n_cloud != len(cloud):
        raise InvalidParameterError(f"render covered {batch.n_cloud} Gaussians, cloud has {len(cloud)}")
    if plan is not None and len(plan) != len(cloud):
        raise InvalidParameterError("drop plan does not match the cloud")

    grads = GradientSet.zeros_like(cloud)
    # Dropped rows stay visible: they count as observed with zero gradient.
    grads.visible = batch.projected.visible.copy()
    if len(batch) == 0:
        return grads

    sg = backward_splats(out, dl_dimage, workers=workers)
    idx = batch.index
    proj = batch.projected

    # Opacity: alpha = comp * sigmoid(logit) * g
    o = batch.base_opacity
    grads.opacity_logits[idx] = sg.opacity * batch.compensation * o * (1.0 - o)

    # Color: clamp(0.5 + sum_b f_cb Y_b(dir), 0)
    sh = cloud.sh_coeffs[idx]
    degree = cloud.sh_degree
    dirs = proj.view_dir[idx]
    d_raw = np.where(batch.color_raw > 0.0, sg.color, 0.0)
    basis = sh_basis(dirs, degree)
    grads.sh_coeffs[idx] = d_raw[:, :, None] * basis[:, None, :]
    coef = (d_raw[:, :, None] * sh).sum(axis=1)                           # (K, B)
    d_dir = (coef[:, :, None] * sh_basis_grad(dirs, degree)).sum(axis=1)  # (K, 3)
    radial = (dirs * d_dir).sum(axis=1, keepdims=True)
    d_center = (d_dir - dirs * radial) / proj.view_dist[idx, None]

    # Conic -> 2D covariance: dCov = -Q G_Q Q
    q = np.empty((len(batch), 2, 2))
    q[:, 0, 0], q[:, 0, 1], q[:, 1, 0], q[:, 1, 1] = (
        batch.conic[:, 0], batch.conic[:, 1], batch.conic[:, 1], batch.conic[:, 2],
    )
    g_q = np.empty_like(q)
    g_q[:, 0, 0] = sg.conic[:, 0]
    g_q[:, 0, 1] = g_q[:, 1, 0] = 0.5 * sg.conic[:, 1]
    g_q[:, 1, 1] = sg.conic[:, 2]
    d_cov2d = -(q @ g_q @ q)

    # cov2d = M Sigma M^T + eps I with M = J W
    jac = proj.jacobian[idx]
    w = cam.rotation_w2c
    m = jac @ w
    sigma = proj.cov3d[idx]
    d_sigma = np.swapaxes(m, -1, -2) @ d_cov2d @ m
    d_m = 2.0 * d_cov2d @ m @ sigma
    d_jac = d_m @ w.T

    # J and the 2D mean -> camera-frame center
    fx, fy = cam.focal
    t = proj.t_cam[idx]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    d_t = np.zeros((len(batch), 3))
    d_t[:, 0] = -fx / tz**2 * d_jac[:, 0, 2] + fx / tz * sg.mean2d[:, 0]
    d_t[:, 1] = -fy / tz**2 * d_jac[:, 1, 2] + fy / tz * sg.mean2d[:, 1]
    d_t[:, 2] = (
        -fx / tz**2 * d_jac[:, 0, 0]
        - fy / tz**2 * d_jac[:, 1, 1]
        + 2.0 * fx * tx / tz**3 * d_jac[:, 0, 2]
        + 2.0 * fy * ty / tz**3 * d_jac[:, 1, 2]
        - fx * tx / tz**2 * sg.mean2d[:, 0]
        - fy * ty / tz**2 * sg.mean2d[:, 1]
    )
    grads.centers[idx] = (d_t[:, :, None] * w).sum(axis=1) + d_center

    # Sigma = A A^T with A = R S
    qn_raw = cloud.rotations[idx]
    qnorm = np.linalg.norm(qn_raw, axis=-1, keepdims=True)
    qn = qn_raw / qnorm
    rot = quat_to_rotation(qn)
    s = np.exp(cloud.log_scales[idx])
    a = rot * s[:, None, :]
    d_a = 2.0 * d_sigma @ a
    grads.log_scales[idx] = (d_a * rot).sum(axis=1) * s
    d_rot = d_a * s[:, None, :]
    d_qn = (d_rot[..., None] * quat_rotation_jacobian(qn)).sum(axis=(1, 2))
    grads.rotations[idx] = (d_qn - qn * (qn * d_qn).sum(axis=-1, keepdims=True)) / qnorm

    width, height = cam.resolution
    grads.screen_grad[idx] = np.hypot(sg.mean2d[:, 0] * width / 2.0, sg.mean2d[:, 1] * height / 2.0)
    return grads


# ──────────────────────────────────────────────────────────────────────
# Finite-difference oracle
# ──────────────────────────────────────────────────────────────────────


@dataclass(eq=False)
class LossSpec:
    """Scalar image loss used by the gradient check: a fixed weighted sum or the color loss."""

    kind: str = "weighted_sum"
    weights: np.ndarray | None = None
    target: np.ndarray | None = None
    lam: float = DEFAULT_LAMBDA

    @classmethod
    def weighted_sum(cls, weights: np.ndarray) -> LossSpec:
        return cls(kind="weighted_sum", weights=np.asarray(weights, dtype=np.float64))

    @classmethod
    def color(cls, target: np.ndarray, lam: float = DEFAULT_LAMBDA) -> LossSpec:
        return cls(kind="color", target=np.asarray(target, dtype=np.float64), lam=lam)

    def evaluate(self, image: np.ndarray) -> tuple[float, np.ndarray]:
        if self.kind == "weighted_sum" and self.weights is not None:
            return float(np.sum(image * self.weights)), self.weights
        if self.kind == "color" and self.target is not None:
            value, grad = color_loss(image, self.target, self.lam)
            return value.total, grad
        raise InvalidParameterError(f"incomplete loss spec of kind {self.kind!r}")


@dataclass
class ClassReport:
    name: str
    max_rel_error: float = 0.0
    worst: tuple[int, ...] | None = None   # (gaussian, component...)
    checked: int = 0
    skipped: int = 0


@dataclass
class GradCheckReport:
    classes: dict[str, ClassReport] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.classes.values()), default=0.0)

    @property
    def skipped(self) -> int:
        return sum(c.skipped for c in self.classes.values())

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "param": c.name,
                    "max_rel_error": c.max_rel_error,
                    "worst": "" if c.worst is None else ",".join(str(v) for v in c.worst),
                    "checked": c.checked,
                    "skipped": c.skipped,
                }
                for c in self.classes.values()
            ],
            columns=["param", "max_rel_error", "worst", "checked", "skipped"],
        )


def finite_diff_check(
    cloud: GaussianCloud,
    cam: Camera,
    plan: DropPlan | None,
    loss_spec: LossSpec,
    step: float = 1e-4,
    *,
    background: np.ndarray | None = None,
    boundary_factor: float = 10.0,
    floor_fraction: float = 1e-3,
    params: tuple[str, ...] = PARAM_FIELDS,
) -> GradCheckReport:
    """Compare ``backward`` with central differences, one scalar parameter at a time.

    Parameters whose +-h or +-``boundary_factor`` h perturbation changes any
    discrete forward decision (culling, cutoff, clamp, early stop, color clamp)
    are skipped. The relative error denominator is floored at
    ``floor_fraction`` times the largest analytic gradient of the class.
    """
    if step <= 0:
        raise InvalidParameterError(f"step must be > 0, got {step}")
    report = GradCheckReport()
    if len(cloud) == 0:
        return report

    base = render(cloud, cam, plan, background=background)
    _, dl_dimage = loss_spec.evaluate(base.image)
    grads = backward(base, cloud, cam, plan, dl_dimage)
    signature = base.branch_signature()

    def perturbed(name: str, pos: tuple[int, ...], delta: float) -> RenderOutput:
        c = cloud.copy()
        getattr(c, name)[pos] += delta
        return render(c, cam, plan, background=background)

    for name in params:
        analytic = getattr(grads, name)
        cls_report = ClassReport(name=name)
        floor = max(1e-10, floor_fraction * float(np.max(np.abs(analytic), initial=0.0)))
        for pos in np.ndindex(analytic.shape):
            far = [perturbed(name, pos, s * boundary_factor * step) for s in (1.0, -1.0)]
            near = [perturbed(name, pos, s * step) for s in (1.0, -1.0)]
            if any(o.branch_signature() != signature for o in far + near):
                cls_report.skipped += 1
                continue
            lp = loss_spec.evaluate(near[0].image)[0]
            lm = loss_spec.evaluate(near[1].image)[0]
            numeric = (lp - lm) / (2.0 * step)
            a = float(analytic[pos])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            cls_report.checked += 1
            if cls_report.worst is None or err > cls_report.max_rel_error:
                cls_report.max_rel_error = err
                cls_report.worst = tuple(int(v) for v in pos)
        report.classes[name] = cls_report
        logger.debug(
            "grad check %s: max rel %.3g, %d checked, %d skipped",
            name, cls_report.max_rel_error, cls_report.checked, cls_report.skipped,
        )
    return report


# ──────────────────────────────────────────────────────────────────────
# Gradient vs. distance histogram
# ──────────────────────────────────────────────────────────────────────


@dataclass(eq=False)
class Histogram:
    edges: np.ndarray     # (bins + 1,)
    counts: np.ndarray    # (bins,)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"bin_lo": self.edges[:-1], "bin_hi": self.edges[1:], "count": self.counts})

    def to_csv(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)


def gradient_distance_histogram(
    grads: GradientSet, cloud: GaussianCloud, cam: Camera, threshold: float, bins: int
) -> Histogram:
    """Count visible Gaussians whose densification statistic exceeds ``threshold``, by camera depth.

    Edges run linearly from the minimum to the maximum depth of the visible Gaussians.
    """
    if bins <= 0:
        raise InvalidParameterError(f"bins must be > 0, got {bins}")
    if threshold <= 0:
        raise InvalidParameterError(f"threshold must be > 0, got {threshold}")
    if len(grads) != len(cloud):
        raise InvalidParameterError("gradients do not match the cloud")
    proj = project_cloud(cloud, cam)
    depth = proj.depth[proj.visible]
    if depth.size == 0:
        return Histogram(edges=np.zeros(bins + 1), counts=np.zeros(bins, dtype=np.int64))
    lo, hi = float(depth.min()), float(depth.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    hot = grads.screen_grad[proj.visible] > threshold
    counts, _ = np.histogram(depth[hot], bins=edges)
    return Histogram(edges=edges, counts=counts.astype(np.int64))

