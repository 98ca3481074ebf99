"""Drop plans: random DropGaussian masks and the ablation baselines.

A ``DropPlan`` removes an exact count round(r * n) of Gaussians from one
training render and scales the survivors' opacity by 1 / (1 - r). Selective
dropping and the rank-weighted L1 opacity penalty are the comparison baselines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidParameterError
from .gaussians import GaussianCloud
from .train_config import CRITERIA, SCHEDULE_MODES

logger = logging.getLogger(__name__)


def drop_count(n: int, r: float) -> int:
    """round(r * n) with half-to-even rounding."""
    return int(round(r * n))


@dataclass(frozen=True, eq=False)
class DropPlan:
    mask: np.ndarray    # (N,) True = dropped this iteration
    rate: float

    def __post_init__(self) -> None:
        mask = np.array(self.mask, dtype=bool).reshape(-1)
        if not 0.0 <= self.rate < 1.0:
            raise InvalidParameterError(f"drop rate must lie in [0, 1), got {self.rate}")
        expected = drop_count(mask.shape[0], self.rate)
        if int(mask.sum()) != expected:
            raise InvalidParameterError(
                f"mask drops {int(mask.sum())} of {mask.shape[0]}, rate {self.rate} requires {expected}"
            )
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "rate", float(self.rate))

    @classmethod
    def none(cls, n: int) -> DropPlan:
        return cls(mask=np.zeros(n, dtype=bool), rate=0.0)

    def __len__(self) -> int:
        return self.mask.shape[0]

    @property
    def compensation(self) -> float:
        return 1.0 if self.rate == 0.0 else 1.0 / (1.0 - self.rate)

    @property
    def n_dropped(self) -> int:
        return int(self.mask.sum())

    def multipliers(self) -> np.ndarray:
        """M(i): 0 for dropped Gaussians, the compensation factor otherwise."""
        return np.where(self.mask, 0.0, self.compensation)


@dataclass(frozen=True)
class DropSchedule:
    gamma: float
    t_total: int
    mode: str = "progressive"

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidParameterError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.mode not in SCHEDULE_MODES:
            raise InvalidParameterError(f"unknown schedule mode {self.mode!r}")
        if self.t_total < 0:
            raise InvalidParameterError(f"t_total must be >= 0, got {self.t_total}")


def drop_rate(sched: DropSchedule, t: int) -> float:
    if not 0 <= t <= sched.t_total:
        raise InvalidParameterError(f"iteration {t} outside [0, {sched.t_total}]")
    if sched.mode == "fixed":
        return sched.gamma
    if sched.t_total == 0:
        return 0.0
    # gamma * (t / t_total) hits gamma exactly at t_total.
    return sched.gamma * (t / sched.t_total)


def sample_drop_mask(n: int, r: float, rng: np.random.Generator) -> DropPlan:
    """Uniformly drop round(r * n) distinct Gaussians; no draws when the count is 0."""
    if n < 0:
        raise InvalidParameterError(f"cloud size must be >= 0, got {n}")
    if not 0.0 <= r < 1.0:
        raise InvalidParameterError(f"drop rate must lie in [0, 1), got {r}")
    mask = np.zeros(n, dtype=bool)
    k = drop_count(n, r)
    if k > 0:
        mask[rng.choice(n, size=k, replace=False)] = True
    return DropPlan(mask=mask, rate=r)


def _checked_metric(cloud: GaussianCloud, metric: np.ndarray, criterion: str) -> np.ndarray:
    if criterion not in CRITERIA:
        raise InvalidParameterError(f"unknown criterion {criterion!r}")
    metric = np.asarray(metric, dtype=np.float64).reshape(-1)
    if metric.shape[0] != len(cloud):
        raise InvalidParameterError(f"metric has {metric.shape[0]} entries, cloud has {len(cloud)}")
    return metric


def selective_drop_mask(cloud: GaussianCloud, metric: np.ndarray, r: float, criterion: str) -> DropPlan:
    """Drop the round(r * n) Gaussians with the lowest key.

    ``metric`` is the accumulated screen gradient (criterion "gradient") or the
    camera depth (criterion "distance", key = -depth so the farthest go first).
    Ties break by index.
    """
    metric = _checked_metric(cloud, metric, criterion)
    if not 0.0 <= r < 1.0:
        raise InvalidParameterError(f"drop rate must lie in [0, 1), got {r}")
    key = metric if criterion == "gradient" else -metric
    k = drop_count(len(cloud), r)
    mask = np.zeros(len(cloud), dtype=bool)
    mask[np.argsort(key, kind="stable")[:k]] = True
    return DropPlan(mask=mask, rate=r)


def l1_rank_weights(cloud: GaussianCloud, metric: np.ndarray, criterion: str) -> np.ndarray:
    """Weights in [0, 1] from the rank of the inverse metric.

    Low-gradient (or far) Gaussians get the largest weight. Ties break by index.
    """
    metric = _checked_metric(cloud, metric, criterion)
    n = metric.shape[0]
    if n <= 1:
        return np.zeros(n)
    key = -metric if criterion == "gradient" else metric
    ranks = rankdata(key, method="ordinal")
    return (ranks - 1.0) / (n - 1.0)


def l1_opacity_penalty(cloud: GaussianCloud, weights: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """lam * sum(w_i * o_i) and its gradient with respect to the opacity logits."""
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != len(cloud):
        raise InvalidParameterError(f"weights have {weights.shape[0]} entries, cloud has {len(cloud)}")
    if lam < 0 or np.any(weights < 0):
        raise InvalidParameterError("lambda and weights must be >= 0")
    o = cloud.opacities
    penalty = float(lam * np.sum(weights * o))
    return penalty, lam * weights * o * (1.0 - o)
