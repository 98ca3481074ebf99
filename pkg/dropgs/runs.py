"""Run directories, run manifests and the ablation sweeps.

A run directory always holds ``run.json`` (the effective config plus the
artifact layout and CSV schemas) next to the artifacts it describes.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import pandas as pd
from pydantic import BaseModel

from . import __version__
from .scene_io import generate_synthetic_scene
from .seeding import SCENE, RngStreams
from .train_config import RegularizerConfig, TrainConfig
from .trainer import TRAIN_LOG_COLUMNS, train

logger = logging.getLogger(__name__)

MANIFEST_FILE = "run.json"
LAYOUT = {
    "manifest": MANIFEST_FILE,
    "train_log": "train_log.csv",
    "cloud": "cloud.json",
    "test_images": "test_images/",
    "histogram": "histogram.csv",
}
SUMMARY_COLUMNS = ["variant", "n_seeds", "train_psnr", "test_psnr", "train_ssim", "test_ssim", "psnr_gap"]
CSV_SCHEMAS = {
    "train_log": "v1:" + ",".join(TRAIN_LOG_COLUMNS),
    "histogram": "v1:bin_lo,bin_hi,count",
    "ablation_summary": "v1:" + ",".join(SUMMARY_COLUMNS),
}


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


class RunManifest(BaseModel):
    command: str
    seed: int
    code_version: str
    created_at: str
    config: dict[str, Any]
    layout: dict[str, str]
    csv_schemas: dict[str, str]


def write_manifest(run_dir: Path, command: str, cfg: TrainConfig) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command=command,
        seed=cfg.seed,
        code_version=__version__,
        created_at=utc_now().isoformat(timespec="seconds"),
        config=cfg.to_dict(),
        layout=LAYOUT,
        csv_schemas=CSV_SCHEMAS,
    )
    path = run_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest.model_dump(), indent=2), encoding="utf-8")
    return path


def load_manifest(run_dir: Path) -> RunManifest:
    return RunManifest.model_validate_json((run_dir / MANIFEST_FILE).read_text(encoding="utf-8"))


# ─────────────────────────────────────────────────────────────────────
# Ablation grids
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Variant:
    name: str
    regularizer: RegularizerConfig


def _schedule_grid() -> list[Variant]:
    grid = [Variant("baseline", RegularizerConfig(kind="none"))]
    for gamma in (0.1, 0.2, 0.3):
        for mode in ("fixed", "progressive"):
            grid.append(Variant(f"drop_{mode}_{gamma:g}", RegularizerConfig(kind="dropgaussian", gamma=gamma, mode=mode)))
    return grid


def _selection_grid() -> list[Variant]:
    return [
        Variant("random", RegularizerConfig(kind="dropgaussian", gamma=0.2)),
        Variant("selective_gradient", RegularizerConfig(kind="selective", gamma=0.2, criterion="gradient")),
        Variant("selective_distance", RegularizerConfig(kind="selective", gamma=0.2, criterion="distance")),
    ]


def _penalty_grid() -> list[Variant]:
    return [
        Variant("drop", RegularizerConfig(kind="dropgaussian", gamma=0.2)),
        Variant("l1_gradient", RegularizerConfig(kind="l1", criterion="gradient")),
        Variant("l1_distance", RegularizerConfig(kind="l1", criterion="distance")),
    ]


ABLATION_TABLES = {
    "schedule": _schedule_grid,      # fixed vs. progressive rate
    "selection": _selection_grid,    # random vs. selective dropping
    "penalty": _penalty_grid,        # dropping vs. L1 opacity penalty
}


def ablation_grid(table: str) -> list[Variant]:
    if table not in ABLATION_TABLES:
        raise ValueError(f"unknown ablation table {table!r}; expected one of {sorted(ABLATION_TABLES)}")
    return ABLATION_TABLES[table]()


@dataclass(frozen=True)
class AblationJob:
    table: str
    variant: str
    regularizer: dict[str, Any]
    base_config: dict[str, Any]
    seed: int
    out_dir: str

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.table / self.variant / f"seed_{self.seed}"


def run_variant(job: AblationJob) -> dict[str, Any]:
    """Train one (variant, seed) pair on its seeded synthetic scene and write its log."""
    cfg = TrainConfig()
    cfg.apply_overrides(job.base_config)
    cfg.regularizer = RegularizerConfig(**job.regularizer)
    cfg.seed = job.seed
    cfg.validate()
    bundle, _ = generate_synthetic_scene(cfg.synthetic, RngStreams(job.seed).get(SCENE))
    result = train(bundle, cfg)
    write_manifest(job.run_dir, f"ablate {job.table}/{job.variant}", cfg)
    result.log.to_csv(job.run_dir / LAYOUT["train_log"])
    last = result.log.records[-1] if result.log.records else None
    logger.info("ablation %s/%s seed %d done", job.table, job.variant, job.seed)
    return {"variant": job.variant, "seed": job.seed, **(asdict(last) if last else {})}


def collect_runs(table_dir: Path) -> pd.DataFrame:
    """Final log row of every run under ``table_dir``, one row per (variant, seed)."""
    rows = []
    for path in sorted(table_dir.glob("*/seed_*/train_log.csv")):
        frame = pd.read_csv(path)
        if frame.empty:
            continue
        row = frame.iloc[-1].to_dict()
        row["variant"] = path.parent.parent.name
        row["seed"] = int(path.parent.name.removeprefix("seed_"))
        rows.append(row)
    return pd.DataFrame(rows)


def summarize(runs: pd.DataFrame, order: list[str] | None = None) -> pd.DataFrame:
    """Median metrics per variant."""
    if runs.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    runs = runs.assign(psnr_gap=runs["train_psnr"] - runs["test_psnr"])
    metrics = ["train_psnr", "test_psnr", "train_ssim", "test_ssim", "psnr_gap"]
    grouped = runs.groupby("variant", sort=False)
    summary = grouped[metrics].median()
    summary.insert(0, "n_seeds", grouped.size())
    summary = summary.reset_index()
    if order is not None:
        rank = {name: i for i, name in enumerate(order)}
        summary = summary.sort_values("variant", key=lambda s: s.map(rank)).reset_index(drop=True)
    return summary[SUMMARY_COLUMNS]


def run_ablation(
    tables: list[str],
    seeds: list[int],
    base_cfg: TrainConfig,
    out_dir: Path,
    *,
    jobs: int = 1,
) -> dict[str, pd.DataFrame]:
    """Sweep the requested grids over ``seeds`` and write ``summary_<table>.csv`` per table."""
    base = base_cfg.to_dict()
    base.pop("regularizer", None)
    grids = {table: ablation_grid(table) for table in tables}
    work = [
        AblationJob(table, v.name, asdict(v.regularizer), base, seed, str(out_dir))
        for table, grid in grids.items()
        for v in grid
        for seed in seeds
    ]
    logger.info("ablation: %d runs over %d tables, %d workers", len(work), len(tables), jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run_variant, work))
    else:
        for job in work:
            run_variant(job)

    summaries = {}
    for table, grid in grids.items():
        summary = summarize(collect_runs(out_dir / table), order=[v.name for v in grid])
        summary.to_csv(out_dir / f"summary_{table}.csv", index=False, float_format="%.17g")
        summaries[table] = summary
    return summaries
