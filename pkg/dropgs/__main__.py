"""dropgs entry point.

Usage:
    python -m dropgs train (--scene DIR | --synthetic) [--iters N] [--reg KIND]
        [--gamma G] [--mode progressive|fixed] [--criterion gradient|distance]
        [--lambda-reg L] [--seed S] [--train-views N] [--test-views N] [--size PX]
        [--eval-interval N] [--workers N] [--out DIR]
    python -m dropgs ablate [--tables schedule,selection,penalty] [--seeds K] [--jobs N] [--iters N] [--out DIR]
    python -m dropgs grad-check [--gaussians N] [--seed S] [--size PX] [--step H] [--drop-rate R] [--tol T]
    python -m dropgs render (--cloud FILE | --ground-truth) (--scene DIR | --synthetic) [--view I] --out PNG
    python -m dropgs eval (--cloud FILE | --ground-truth) (--scene DIR | --synthetic) [--split test]
    python -m dropgs histogram (--cloud FILE | --ground-truth) (--scene DIR | --synthetic) [--view I] [--threshold T] [--bins N] [--out CSV]
    python -m dropgs make-scene --out DIR [--train-views N] [--test-views N] [--size PX] [--seed S]

Every command also takes --config FILE (default data/config.json).
Flags override config-file values, which override defaults.
"""

from __future__ import annotations

import logging
import os
import sys
import time
from pathlib import Path

from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table

from .errors import DropGSError
from .train_config import CONFIG_PATH, TrainConfig

logger = logging.getLogger("dropgs")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
DEFAULT_HISTOGRAM_THRESHOLD = 5e-4
DEFAULT_HISTOGRAM_BINS = 10
COMMANDS = ("train", "ablate", "grad-check", "render", "eval", "histogram", "make-scene")


class UsageError(Exception):
    """Bad or missing command-line flags."""


def _parse_flags(args: list[str]) -> tuple[list[str], dict[str, str]]:
    """Parse positional args and --key/--flag options from argv."""
    positional: list[str] = []
    flags: dict[str, str] = {}
    i = 0
    while i < len(args):
        a = args[i]
        if a.startswith("--"):
            key = a.lstrip("-")
            # Boolean flag (no value) or key value
            if i + 1 < len(args) and not args[i + 1].startswith("--"):
                flags[key] = args[i + 1]
                i += 2
            else:
                flags[key] = "true"
                i += 1
        else:
            positional.append(a)
            i += 1
    return positional, flags


# Flag name -> config key; nested keys are "block.field".
_FLAG_TO_CONFIG = {
    "iters": "t_total",
    "seed": "seed",
    "eval-interval": "eval_interval",
    "densify-interval": "densify_interval",
    "densify-until": "densify_until",
    "lambda": "lambda_dssim",
    "workers": "workers",
    "tile-size": "tile_size",
    "sh-degree": "sh_degree",
    "init": "init_strategy",
    "reg": "regularizer.kind",
    "gamma": "regularizer.gamma",
    "mode": "regularizer.mode",
    "criterion": "regularizer.criterion",
    "lambda-reg": "regularizer.lambda_reg",
    "train-views": "synthetic.n_train",
    "test-views": "synthetic.n_test",
}


def _int_flag(flags: dict[str, str], name: str, default: int) -> int:
    raw = flags.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as e:
        raise UsageError(f"--{name} must be an integer, got {raw!r}") from e


def _float_flag(flags: dict[str, str], name: str, default: float) -> float:
    raw = flags.get(name)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError as e:
        raise UsageError(f"--{name} must be a number, got {raw!r}") from e


def _build_config(flags: dict[str, str]) -> TrainConfig:
    path = Path(flags["config"]) if "config" in flags else CONFIG_PATH
    if "config" in flags and not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cfg = TrainConfig.load_from_file(path)

    overrides: dict[str, object] = {}
    env_workers = os.environ.get("DROPGS_WORKERS")
    if env_workers and "workers" not in flags:
        overrides["workers"] = env_workers
    for flag, key in _FLAG_TO_CONFIG.items():
        if flag not in flags:
            continue
        block, _, name = key.rpartition(".")
        target = overrides.setdefault(block, {}) if block else overrides
        target[name or key] = flags[flag]  # type: ignore[index]
    if "size" in flags:
        overrides.setdefault("synthetic", {}).update(  # type: ignore[union-attr]
            {"width": flags["size"], "height": flags["size"]}
        )
    cfg.apply_overrides(overrides)
    cfg.validate()
    return cfg


def _load_bundle(flags: dict[str, str], cfg: TrainConfig):
    """(bundle, ground-truth cloud or None) from --scene or --synthetic."""
    from .scene_io import generate_synthetic_scene, load_scene
    from .seeding import SCENE, RngStreams

    if "scene" in flags:
        return load_scene(Path(flags["scene"])), None
    if "synthetic" in flags:
        return generate_synthetic_scene(cfg.synthetic, RngStreams(cfg.seed).get(SCENE))
    raise UsageError("a scene is required: pass --scene DIR or --synthetic")


def _load_model(flags: dict[str, str], truth, sh_degree: int):
    from .gaussians import GaussianCloud
    from .scene_io import load_cloud

    if "ground-truth" in flags:
        if truth is None:
            raise UsageError("--ground-truth needs --synthetic")
        return truth
    if "cloud" in flags:
        return load_cloud(Path(flags["cloud"]))
    return GaussianCloud.empty(sh_degree)


def _view_index(flags: dict[str, str], n_views: int) -> int:
    idx = _int_flag(flags, "view", 0)
    if not 0 <= idx < n_views:
        raise UsageError(f"--view {idx} outside 0..{n_views - 1}")
    return idx


# ─────────────────────────────────────────────────────────────────────
# Commands
# ─────────────────────────────────────────────────────────────────────


def cmd_train(flags: dict[str, str], console: Console) -> int:
    from .autograd import backward, gradient_distance_histogram
    from .losses import color_loss
    from .renderer import render
    from .runs import LAYOUT, write_manifest
    from .scene_io import Split, save_cloud, write_image
    from .trainer import train

    cfg = _build_config(flags)
    bundle, _ = _load_bundle(flags, cfg)
    out_dir = Path(flags.get("out", f"runs/train_seed{cfg.seed}"))
    write_manifest(out_dir, "train", cfg)

    result = train(bundle, cfg)
    result.log.to_csv(out_dir / LAYOUT["train_log"])
    save_cloud(result.cloud, out_dir / LAYOUT["cloud"])
    for view in bundle.split(Split.TEST):
        image = render(result.cloud, view.camera, background=cfg.background, workers=cfg.workers).image
        write_image(out_dir / LAYOUT["test_images"] / f"{view.camera.name or 'view'}.png", image)

    grads, cam = result.last_grads, result.last_camera
    if cam is not None:
        if grads is None:
            view = next(v for v in bundle.views if v.camera is cam)
            out = render(result.cloud, cam, background=cfg.background)
            grads = backward(out, result.cloud, cam, None, color_loss(out.image, view.image, cfg.lambda_dssim)[1])
        threshold = _float_flag(flags, "threshold", DEFAULT_HISTOGRAM_THRESHOLD)
        hist = gradient_distance_histogram(grads, result.cloud, cam, threshold, _int_flag(flags, "bins", DEFAULT_HISTOGRAM_BINS))
        hist.to_csv(out_dir / LAYOUT["histogram"])

    _print_log(console, result.log)
    console.print(f"[green]run written to {out_dir}[/green]")
    return EXIT_OK


def _print_log(console: Console, log) -> None:
    if not log.records:
        console.print("[dim]no evaluation records[/dim]")
        return
    table = Table(title="Training log", show_lines=False)
    for col in ("iter", "train PSNR", "test PSNR", "test SSIM", "Gaussians", "r_t"):
        table.add_column(col, justify="right")
    for r in log.records:
        table.add_row(str(r.iter), f"{r.train_psnr:.2f}", f"{r.test_psnr:.2f}", f"{r.test_ssim:.4f}",
                      str(r.n_gaussians), f"{r.r_t:.3f}")
    console.print(table)


def cmd_ablate(flags: dict[str, str], console: Console) -> int:
    from .runs import ABLATION_TABLES, run_ablation

    cfg = _build_config(flags)
    tables = [t.strip() for t in flags.get("tables", ",".join(ABLATION_TABLES)).split(",") if t.strip()]
    unknown = [t for t in tables if t not in ABLATION_TABLES]
    if unknown:
        raise UsageError(f"unknown ablation tables: {', '.join(unknown)}")
    k = _int_flag(flags, "seeds", 5)
    if k < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = [cfg.seed + i for i in range(k)]
    out_dir = Path(flags.get("out", "runs/ablation"))
    jobs = _int_flag(flags, "jobs", 1)
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    summaries = run_ablation(tables, seeds, cfg, out_dir, jobs=jobs)

    for name, summary in summaries.items():
        table = Table(title=f"Ablation: {name} (median over {k} seeds)")
        for col in summary.columns:
            table.add_column(col, justify="right" if col != "variant" else "left")
        for row in summary.itertuples(index=False):
            table.add_row(*(f"{v:.3f}" if isinstance(v, float) else str(v) for v in row))
        console.print(table)
    return EXIT_OK


def cmd_grad_check(flags: dict[str, str], console: Console) -> int:
    from .autograd import LossSpec, finite_diff_check
    from .regularizer import sample_drop_mask
    from .scene_io import random_check_scene
    from .seeding import MASK, SCENE, RngStreams

    n = _int_flag(flags, "gaussians", 5)
    seed = _int_flag(flags, "seed", 0)
    size = _int_flag(flags, "size", 32)
    step = _float_flag(flags, "step", 1e-4)
    rate = _float_flag(flags, "drop-rate", 0.0)
    tol = _float_flag(flags, "tol", 1e-3)
    if n < 0 or size < 1:
        raise UsageError("--gaussians must be >= 0 and --size >= 1")

    streams = RngStreams(seed)
    cloud, cam = random_check_scene(n, size, streams.get(SCENE), sh_degree=_int_flag(flags, "sh-degree", 1))
    plan = sample_drop_mask(n, rate, streams.get(MASK)) if rate > 0 else None
    weights = streams.get(SCENE).normal(size=(size, size, 3))
    report = finite_diff_check(cloud, cam, plan, LossSpec.weighted_sum(weights), step)

    table = Table(title=f"Gradient check ({n} Gaussians, h={step:g})")
    for col in ("param", "max rel error", "worst", "checked", "skipped"):
        table.add_column(col)
    for row in report.to_frame().itertuples(index=False):
        color = "green" if row.max_rel_error < tol else "red"
        table.add_row(row.param, f"[{color}]{row.max_rel_error:.3e}[/{color}]", row.worst, str(row.checked), str(row.skipped))
    console.print(table)
    console.print(f"max relative error: {report.max_rel_error:.3e} (tolerance {tol:g})")
    return EXIT_OK if report.passed(tol) else EXIT_ERROR


def cmd_render(flags: dict[str, str], console: Console) -> int:
    from .renderer import render
    from .scene_io import write_image

    if "out" not in flags:
        raise UsageError("render needs --out PNG")
    cfg = _build_config(flags)
    bundle, truth = _load_bundle(flags, cfg)
    cloud = _load_model(flags, truth, cfg.sh_degree)
    view = bundle.views[_view_index(flags, len(bundle.views))]
    image = render(cloud, view.camera, background=cfg.background, workers=cfg.workers).image
    write_image(Path(flags["out"]), image)
    console.print(f"rendered {view.camera.name or 'view'} ({len(cloud)} Gaussians) -> {flags['out']}")
    return EXIT_OK


def cmd_eval(flags: dict[str, str], console: Console) -> int:
    from .trainer import evaluate

    cfg = _build_config(flags)
    bundle, truth = _load_bundle(flags, cfg)
    if "cloud" not in flags and "ground-truth" not in flags:
        raise UsageError("eval needs --cloud FILE or --ground-truth")
    cloud = _load_model(flags, truth, cfg.sh_degree)
    result = evaluate(cloud, bundle, flags.get("split", "test"), background=cfg.background, workers=cfg.workers)

    table = Table(title=f"Evaluation on {result.split} views")
    table.add_column("view")
    table.add_column("PSNR", justify="right")
    table.add_column("SSIM", justify="right")
    for v in result.views:
        table.add_row(v.name, f"{v.psnr:.2f}", f"{v.ssim:.4f}")
    table.add_row("[bold]mean[/bold]", f"[bold]{result.mean_psnr:.2f}[/bold]", f"[bold]{result.mean_ssim:.4f}[/bold]")
    console.print(table)
    return EXIT_OK


def cmd_histogram(flags: dict[str, str], console: Console) -> int:
    from .autograd import backward, gradient_distance_histogram
    from .losses import color_loss
    from .renderer import render

    cfg = _build_config(flags)
    bundle, truth = _load_bundle(flags, cfg)
    cloud = _load_model(flags, truth, cfg.sh_degree)
    view = bundle.views[_view_index(flags, len(bundle.views))]
    out = render(cloud, view.camera, background=cfg.background)
    _, dl_dimage = color_loss(out.image, view.image, cfg.lambda_dssim)
    grads = backward(out, cloud, view.camera, None, dl_dimage)
    hist = gradient_distance_histogram(
        grads, cloud, view.camera,
        _float_flag(flags, "threshold", DEFAULT_HISTOGRAM_THRESHOLD),
        _int_flag(flags, "bins", DEFAULT_HISTOGRAM_BINS),
    )
    if "out" in flags:
        hist.to_csv(Path(flags["out"]))

    table = Table(title="Gaussians above threshold by camera depth")
    for col in ("depth from", "depth to", "count"):
        table.add_column(col, justify="right")
    for lo, hi, count in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
        table.add_row(f"{lo:.3f}", f"{hi:.3f}", str(int(count)))
    console.print(table)
    return EXIT_OK


def cmd_make_scene(flags: dict[str, str], console: Console) -> int:
    from .scene_io import save_cloud, save_scene

    if "out" not in flags:
        raise UsageError("make-scene needs --out DIR")
    cfg = _build_config(flags)
    flags = {**flags, "synthetic": "true"}
    bundle, truth = _load_bundle(flags, cfg)
    out_dir = Path(flags["out"])
    save_scene(bundle, out_dir)
    save_cloud(truth, out_dir / "ground_truth.json")
    console.print(f"scene with {len(bundle.views)} views and {len(truth)} Gaussians written to {out_dir}")
    return EXIT_OK


_HANDLERS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
    "render": cmd_render,
    "eval": cmd_eval,
    "histogram": cmd_histogram,
    "make-scene": cmd_make_scene,
}


def _dispatch(cmd: str, flags: dict[str, str], console: Console) -> int:
    """Route CLI sub-commands."""
    handler = _HANDLERS.get(cmd)
    if handler is None:
        raise UsageError(f"unknown command {cmd!r}; expected one of {', '.join(COMMANDS)}")
    return handler(flags, console)


def _setup_logging() -> None:
    from logging.handlers import RotatingFileHandler

    log_dir = Path(os.environ.get("DROPGS_LOG_DIR", "logs"))
    log_dir.mkdir(parents=True, exist_ok=True)

    log_fmt = logging.Formatter(
        "%(asctime)s UTC [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    log_fmt.converter = time.gmtime

    # Console: INFO
    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.INFO)
    console_handler.setFormatter(log_fmt)

    # File: DEBUG, 10MB × 5 backups
    file_handler = RotatingFileHandler(
        log_dir / "dropgs.log", maxBytes=10 * 1024 * 1024, backupCount=5, encoding="utf-8",
    )
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(log_fmt)

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG)
    root_logger.addHandler(console_handler)
    root_logger.addHandler(file_handler)
    logging.getLogger("PIL").setLevel(logging.WARNING)


def run(argv: list[str], console: Console | None = None) -> int:
    """Execute one command and return its exit status."""
    console = console or Console()
    positional, flags = _parse_flags(argv)
    if not positional or "help" in flags:
        console.print(__doc__)
        return EXIT_OK if "help" in flags else EXIT_USAGE
    try:
        return _dispatch(positional[0], flags, console)
    except UsageError as e:
        console.print(f"[red]usage error:[/red] {e}")
        console.print(__doc__)
        return EXIT_USAGE
    except (DropGSError, ValueError) as e:
        logger.debug("command failed", exc_info=True)
        console.print(f"\n[red]❌ {type(e).__name__}: {e}[/red]")
        return EXIT_ERROR


def main() -> None:
    load_dotenv()
    _setup_logging()
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
