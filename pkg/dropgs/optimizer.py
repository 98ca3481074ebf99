"""Adam updates and adaptive density control (clone / split / prune).

Every per-Gaussian structure (cloud rows, Adam moments, densification stats)
is edited in lockstep so row i always refers to the same Gaussian.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import GradientSet
from .errors import InvalidParameterError, NonFiniteGradientError
from .gaussians import PARAM_FIELDS, GaussianCloud, quat_to_rotation

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6


@dataclass
class LearningRates:
    center: float = 1.6e-4
    center_final: float = 1.6e-6
    opacity: float = 0.05
    scale: float = 5e-3
    rotation: float = 1e-3
    sh: float = 2.5e-3

    @classmethod
    def uniform(cls, lr: float) -> LearningRates:
        return cls(center=lr, center_final=lr, opacity=lr, scale=lr, rotation=lr, sh=lr)


def center_lr(lr_init: float, lr_final: float, step: int, max_steps: int) -> float:
    """Log-linear interpolation from lr_init to lr_final over max_steps."""
    if max_steps <= 0 or lr_init <= 0.0 or lr_final <= 0.0:
        return lr_init
    t = min(max(step / max_steps, 0.0), 1.0)
    return math.exp(math.log(lr_init) * (1.0 - t) + math.log(lr_final) * t)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lrs: LearningRates = field(default_factory=LearningRates)
    step: int = 0
    spatial_scale: float = 1.0      # center lr is multiplied by the scene extent
    max_steps: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    @classmethod
    def for_cloud(
        cls,
        cloud: GaussianCloud,
        lrs: LearningRates | None = None,
        *,
        spatial_scale: float = 1.0,
        max_steps: int = 0,
    ) -> AdamState:
        arrays = cloud.arrays()
        return cls(
            m={name: np.zeros_like(arrays[name]) for name in PARAM_FIELDS},
            v={name: np.zeros_like(arrays[name]) for name in PARAM_FIELDS},
            lrs=lrs or LearningRates(),
            spatial_scale=spatial_scale,
            max_steps=max_steps,
        )

    def __len__(self) -> int:
        return self.m["centers"].shape[0]

    def lr(self, name: str) -> float:
        if name == "centers":
            return center_lr(self.lrs.center, self.lrs.center_final, self.step, self.max_steps) * self.spatial_scale
        return {
            "log_scales": self.lrs.scale,
            "rotations": self.lrs.rotation,
            "opacity_logits": self.lrs.opacity,
            "sh_coeffs": self.lrs.sh,
        }[name]

    def take(self, index: np.ndarray) -> AdamState:
        """Rows selected by ``index``; hyperparameters and step carried over."""
        return AdamState(
            m={k: a[index].copy() for k, a in self.m.items()},
            v={k: a[index].copy() for k, a in self.v.items()},
            lrs=self.lrs,
            step=self.step,
            spatial_scale=self.spatial_scale,
            max_steps=self.max_steps,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )

    def append_zeros(self, n: int) -> None:
        for moments in (self.m, self.v):
            for k, a in moments.items():
                moments[k] = np.concatenate([a, np.zeros((n, *a.shape[1:]))])


def _check_layout(cloud: GaussianCloud, grads: GradientSet, state: AdamState) -> None:
    for name in PARAM_FIELDS:
        shape = getattr(cloud, name).shape
        if getattr(grads, name).shape != shape or state.m[name].shape != shape:
            raise InvalidParameterError(f"layout mismatch for {name}: cloud {shape}")


def adam_step(cloud: GaussianCloud, grads: GradientSet, state: AdamState) -> None:
    """One bias-corrected Adam update of every parameter, in place.

    Quaternions whose update was non-zero are renormalized afterwards.
    """
    _check_layout(cloud, grads, state)
    for name in PARAM_FIELDS:
        g = getattr(grads, name)
        bad = ~np.isfinite(g.reshape(g.shape[0], -1)).all(axis=1)
        if bad.any():
            raise NonFiniteGradientError(int(np.argmax(bad)), name)

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name in PARAM_FIELDS:
        g = getattr(grads, name)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        update = state.lr(name) * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        param = getattr(cloud, name)
        param -= update
        if name == "rotations":
            changed = np.any(update != 0.0, axis=1)
            if changed.any():
                param[changed] /= np.linalg.norm(param[changed], axis=1, keepdims=True)


# ──────────────────────────────────────────────────────────────────────
# Densification
# ──────────────────────────────────────────────────────────────────────


@dataclass
class DensifyStats:
    grad_accum: np.ndarray     # (N,) summed screen-gradient norms
    count: np.ndarray          # (N,) observations since the last densification
    center_grad: np.ndarray    # (N, 3) summed world-space center gradients

    @classmethod
    def zeros(cls, n: int) -> DensifyStats:
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros((n, 3)))

    def __len__(self) -> int:
        return self.grad_accum.shape[0]

    def mean(self) -> np.ndarray:
        return self.grad_accum / np.maximum(self.count, 1)


def accumulate_densify_stats(stats: DensifyStats, grads: GradientSet, visibility: np.ndarray) -> None:
    visibility = np.asarray(visibility, dtype=bool)
    if len(stats) != len(grads) or visibility.shape != (len(stats),):
        raise InvalidParameterError("densification stats, gradients and visibility must align")
    stats.grad_accum[visibility] += grads.screen_grad[visibility]
    stats.count[visibility] += 1
    stats.center_grad[visibility] += grads.centers[visibility]


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    state: AdamState
    stats: DensifyStats
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0


def densify_and_prune(
    cloud: GaussianCloud,
    stats: DensifyStats,
    state: AdamState,
    threshold: float,
    scale_split_threshold: float,
    min_opacity: float,
    rng: np.random.Generator,
) -> DensifyResult:
    """Clone small hot Gaussians, split large ones, then prune transparent ones.

    Hot means mean densification statistic > ``threshold``. A clone is offset
    by one largest standard deviation against the accumulated center gradient.
    A split replaces the parent with two children sampled from it, scales / 1.6.
    New rows start with zero Adam moments; stats are reset.
    """
    n = len(cloud)
    if len(stats) != n or len(state) != n:
        raise InvalidParameterError("cloud, densification stats and Adam state must align")

    hot = stats.mean() > threshold
    max_scale = cloud.scales.max(axis=1) if n else np.zeros(0)
    clone = hot & (max_scale < scale_split_threshold)
    split = hot & ~clone

    clone_idx = np.flatnonzero(clone)
    clones = cloud.subset(clone_idx)
    direction = -stats.center_grad[clone_idx]
    norm = np.linalg.norm(direction, axis=1, keepdims=True)
    unit = np.divide(direction, norm, out=np.zeros_like(direction), where=norm > 0)
    clones.centers += unit * max_scale[clone_idx, None]

    split_idx = np.flatnonzero(split)
    children = cloud.subset(np.repeat(split_idx, SPLIT_CHILDREN))
    samples = rng.normal(size=(len(children), 3)) * children.scales
    rot = quat_to_rotation(children.rotations) if len(children) else np.zeros((0, 3, 3))
    children.centers += (rot * samples[:, None, :]).sum(axis=-1)
    children.log_scales -= math.log(SPLIT_SCALE_DIVISOR)

    keep = ~split
    grown = cloud.subset(keep).concat(clones).concat(children)
    new_state = state.take(keep)
    new_state.append_zeros(len(clones) + len(children))

    pruned = grown.opacities < min_opacity
    final = grown.subset(~pruned)
    final_state = new_state.take(~pruned)

    result = DensifyResult(
        cloud=final,
        state=final_state,
        stats=DensifyStats.zeros(len(final)),
        n_cloned=len(clone_idx),
        n_split=len(split_idx),
        n_pruned=int(pruned.sum()),
    )
    logger.debug(
        "densify: %d -> %d (cloned %d, split %d, pruned %d)",
        n, len(final), result.n_cloned, result.n_split, result.n_pruned,
    )
    return result
