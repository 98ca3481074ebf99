"""Training and scene-generation configuration.

Defaults reproduce the published training protocol (10k iterations,
densification every 100 iterations, gradient threshold 5e-4, lambda 0.2).
Overrides live in ``data/config.json``: top-level keys set ``TrainConfig``
fields, the ``"regularizer"`` and ``"synthetic"`` blocks set the nested configs.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_PATH = Path("data/config.json")
REGULARIZER_KEY = "regularizer"
SYNTHETIC_KEY = "synthetic"

REGULARIZER_KINDS = ("none", "dropgaussian", "selective", "l1")
SCHEDULE_MODES = ("progressive", "fixed")
CRITERIA = ("gradient", "distance")
INIT_STRATEGIES = ("from_points", "random")


@dataclass
class RegularizerConfig:
    """Which regularizer is active and its knobs; exactly one kind at a time."""

    kind: str = "none"
    gamma: float = 0.2              # drop-rate scale factor
    mode: str = "progressive"       # progressive: r_t = gamma * t / t_total; fixed: r_t = gamma
    criterion: str = "gradient"     # selective / l1 ablations
    lambda_reg: float = 1e-3        # l1 ablation weight

    def validate(self) -> None:
        if self.kind not in REGULARIZER_KINDS:
            raise ConfigError("regularizer.kind", self.kind, f"expected one of {REGULARIZER_KINDS}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("regularizer.gamma", self.gamma, "must lie in [0, 1)")
        if self.mode not in SCHEDULE_MODES:
            raise ConfigError("regularizer.mode", self.mode, f"expected one of {SCHEDULE_MODES}")
        if self.criterion not in CRITERIA:
            raise ConfigError("regularizer.criterion", self.criterion, f"expected one of {CRITERIA}")
        if self.lambda_reg < 0:
            raise ConfigError("regularizer.lambda_reg", self.lambda_reg, "must be >= 0")

    @property
    def drops(self) -> bool:
        return self.kind in ("dropgaussian", "selective")


@dataclass
class SyntheticSceneConfig:
    """Desk-scale sparse-view scene: a near and a far cluster seen from an arc of cameras."""

    n_train: int = 3
    n_test: int = 5
    width: int = 64
    height: int = 64
    fov_deg: float = 50.0
    camera_distance: float = 4.0
    arc_deg: float = 70.0
    n_near: int = 40
    n_far: int = 60
    near_offset: float = 0.6        # cluster centers on the optical axis of the arc center
    far_offset: float = 1.2
    cluster_spread: float = 0.35
    scale_range: tuple[float, float] = (0.06, 0.16)
    opacity_range: tuple[float, float] = (0.5, 0.95)
    sh_degree: int = 1
    n_init_points: int = 200
    point_noise: float = 0.05
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self) -> None:
        for name in ("n_train", "n_near", "n_far", "width", "height", "n_init_points"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"synthetic.{name}", getattr(self, name), "must be > 0")
        if self.n_test < 0:
            raise ConfigError("synthetic.n_test", self.n_test, "must be >= 0")
        if not 0 <= self.sh_degree <= 2:
            raise ConfigError("synthetic.sh_degree", self.sh_degree, "supported degrees are 0..2")


@dataclass
class TrainConfig:
    """Optimization protocol for one training run."""

    t_total: int = 10000
    densify_interval: int = 100
    densify_grad_threshold: float = 5e-4
    densify_until: int | None = None        # None: t_total // 2
    min_opacity: float = 0.005
    split_scale_fraction: float = 0.01      # of scene extent
    lambda_dssim: float = 0.2
    eval_interval: int = 100
    seed: int = 0

    sh_degree: int = 1
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    init_strategy: str = "from_points"
    init_points: int = 1000                 # random init only

    # ── Adam learning rates ────────────────────────────────────────────
    lr_center: float = 1.6e-4
    lr_center_final: float = 1.6e-6
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_sh: float = 2.5e-3

    # ── Execution ──────────────────────────────────────────────────────
    workers: int = 1
    tile_size: int = 8

    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    synthetic: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)

    @property
    def densify_until_iter(self) -> int:
        return self.t_total // 2 if self.densify_until is None else self.densify_until

    def validate(self) -> None:
        if self.t_total < 0:
            raise ConfigError("t_total", self.t_total, "must be >= 0")
        if self.densify_interval <= 0:
            raise ConfigError("densify_interval", self.densify_interval, "must be > 0")
        if self.eval_interval < 0:
            raise ConfigError("eval_interval", self.eval_interval, "must be >= 0")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ConfigError("init_strategy", self.init_strategy, f"expected one of {INIT_STRATEGIES}")
        if not 0 <= self.sh_degree <= 2:
            raise ConfigError("sh_degree", self.sh_degree, "supported degrees are 0..2")
        if self.workers < 1:
            raise ConfigError("workers", self.workers, "must be >= 1")
        if self.tile_size < 1:
            raise ConfigError("tile_size", self.tile_size, "must be >= 1")
        if len(self.background) != 3:
            raise ConfigError("background", self.background, "expected 3 channels")
        self.regularizer.validate()
        self.synthetic.validate()

    # ── Serialization ──────────────────────────────────────────────────

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["background"] = list(self.background)
        data[SYNTHETIC_KEY]["background"] = list(self.synthetic.background)
        data[SYNTHETIC_KEY]["scale_range"] = list(self.synthetic.scale_range)
        data[SYNTHETIC_KEY]["opacity_range"] = list(self.synthetic.opacity_range)
        return data

    def copy(self) -> TrainConfig:
        return copy.deepcopy(self)

    @classmethod
    def load_from_file(cls, path: Path = CONFIG_PATH) -> TrainConfig:
        """Defaults overridden by values from JSON if the file exists."""
        config = cls()
        if path.is_file():
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError("file", str(path), str(e)) from e
            if not isinstance(data, dict):
                raise ConfigError("file", str(path), "top level must be an object")
            config.apply_overrides(data)
            logger.info("Config loaded from %s", path)
        config.validate()
        return config

    def apply_overrides(self, block: dict[str, Any]) -> None:
        """Merge a JSON-like dict; nested blocks go to the nested configs."""
        unknown: list[str] = []
        names = {f.name for f in fields(self)}
        for key, value in block.items():
            if key == REGULARIZER_KEY and isinstance(value, dict):
                _apply_block(self.regularizer, value, REGULARIZER_KEY)
            elif key == SYNTHETIC_KEY and isinstance(value, dict):
                _apply_block(self.synthetic, value, SYNTHETIC_KEY)
            elif key in names and key not in (REGULARIZER_KEY, SYNTHETIC_KEY):
                _apply_field(self, key, value)
            else:
                unknown.append(key)
        if unknown:
            logger.info("config: unknown keys (ignored): %s", ", ".join(sorted(unknown)))


def _apply_block(target: object, block: dict[str, Any], prefix: str) -> None:
    names = {f.name for f in fields(target)}
    for key, value in block.items():
        if key in names:
            _apply_field(target, key, value, prefix=prefix)
        else:
            logger.info("config: unknown key %s.%s (ignored)", prefix, key)


def _apply_field(cfg: object, name: str, value: object, *, prefix: str = "") -> None:
    """Coerce ``value`` to the type of the current field value and set it."""
    label = f"{prefix}.{name}" if prefix else name
    cur = getattr(cfg, name)
    try:
        if name == "densify_until":
            setattr(cfg, name, None if value is None else int(value))
        elif isinstance(cur, bool):
            setattr(cfg, name, bool(value))
        elif isinstance(cur, int):
            setattr(cfg, name, int(value))
        elif isinstance(cur, float):
            setattr(cfg, name, float(value))
        elif isinstance(cur, str):
            setattr(cfg, name, str(value))
        elif isinstance(cur, tuple):
            items = tuple(float(v) for v in value)  # type: ignore[union-attr]
            if len(items) != len(cur):
                raise ValueError(f"expected {len(cur)} values")
            setattr(cfg, name, items)
        else:
            raise ValueError("unsupported field type")
    except (TypeError, ValueError) as e:
        raise ConfigError(label, value, str(e)) from e
