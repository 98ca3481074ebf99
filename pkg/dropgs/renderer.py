"""Tile-based forward rasterizer.

Splats are depth sorted once per view. The image is cut into square tiles of
``tile_size`` pixels; each tile gathers only the splats whose 3-sigma box
overlaps it and composites them front to back. Tiles run on a thread pool and
are independent, so the image does not depend on the worker count.
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .errors import InvalidParameterError
from .gaussians import GaussianCloud, ProjectedCloud, Splat2D, eval_sh_raw, project_cloud, sigmoid
from .regularizer import DropPlan

logger = logging.getLogger(__name__)

ALPHA_MAX = 0.99
T_MIN = 1e-4
CUTOFF_SIGMA = 3.0
DEFAULT_TILE_SIZE = 8


# ──────────────────────────────────────────────────────────────────────
# Scalar reference ops
# ──────────────────────────────────────────────────────────────────────


def depth_sort(splats: Sequence[Splat2D] | np.ndarray) -> np.ndarray:
    """Front-to-back order; ties keep their input order."""
    if isinstance(splats, np.ndarray):
        depths = splats.astype(np.float64).reshape(-1)
    else:
        depths = np.array([s.depth for s in splats], dtype=np.float64)
    return np.argsort(depths, kind="stable")


def composite_pixel(
    entries: Sequence[tuple[np.ndarray, float]],
    background: np.ndarray | Sequence[float] = (0.0, 0.0, 0.0),
) -> tuple[np.ndarray, float]:
    """Front-to-back over operator for one pixel.

    ``entries`` are (color, alpha) pairs already in depth order. Returns the
    composited color and the transmittance left after the last blended entry.
    """
    color = np.zeros(3)
    trans = 1.0
    for c, a in entries:
        if trans < T_MIN:
            break
        a = min(float(a), ALPHA_MAX)
        color += np.asarray(c, dtype=np.float64) * a * trans
        trans *= 1.0 - a
    return color + trans * np.asarray(background, dtype=np.float64), trans


# ──────────────────────────────────────────────────────────────────────
# Per-view batch
# ──────────────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class ViewBatch:
    """Splats that take part in one render, in depth order.

    Culled and dropped Gaussians are absent. ``index`` maps rows back to the
    cloud; ``opacity`` already carries the drop compensation.
    """

    index: np.ndarray          # (K,) cloud rows
    mean2d: np.ndarray         # (K, 2)
    conic: np.ndarray          # (K, 3) inverse covariance (a, b, c)
    radius: np.ndarray         # (K,) 3-sigma pixel radius
    depth: np.ndarray          # (K,)
    color: np.ndarray          # (K, 3) clamped
    color_raw: np.ndarray      # (K, 3) before the clamp
    opacity: np.ndarray        # (K,) effective
    base_opacity: np.ndarray   # (K,) sigmoid(logit)
    compensation: float
    n_cloud: int
    projected: ProjectedCloud

    def __len__(self) -> int:
        return self.index.shape[0]


def prepare_view(cloud: GaussianCloud, cam: Camera, plan: DropPlan | None = None) -> ViewBatch:
    """Project, cull, drop and sort."""
    proj = project_cloud(cloud, cam)
    keep = proj.visible.copy()
    compensation = 1.0
    if plan is not None:
        mask = plan.mask
        if mask.shape != (len(cloud),):
            raise InvalidParameterError(f"drop plan covers {mask.shape[0]} Gaussians, cloud has {len(cloud)}")
        keep &= ~mask
        compensation = float(plan.compensation)

    rows = np.flatnonzero(keep)
    order = rows[np.argsort(proj.depth[rows], kind="stable")]

    cov = proj.cov2d[order]
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=-1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = CUTOFF_SIGMA * np.sqrt(lam_max)

    color_raw = eval_sh_raw(cloud.sh_coeffs[order], proj.view_dir[order])
    base = sigmoid(cloud.opacity_logits[order])
    return ViewBatch(
        index=order,
        mean2d=proj.mean2d[order],
        conic=conic,
        radius=radius,
        depth=proj.depth[order],
        color=np.maximum(color_raw, 0.0),
        color_raw=color_raw,
        opacity=base * compensation,
        base_opacity=base,
        compensation=compensation,
        n_cloud=len(cloud),
        projected=proj,
    )


# ──────────────────────────────────────────────────────────────────────
# Rasterization
# ──────────────────────────────────────────────────────────────────────


@dataclass(eq=False)
class TileRecord:
    """Forward state of one square tile, kept for the backward pass.

    Matrices are (splats in tile, pixels in tile); pixels are row-major
    within the tile.
    """

    x0: int
    x1: int
    y0: int
    y1: int
    splats: np.ndarray         # (Kt,) rows of the ViewBatch
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray          # g(p)
    alpha: np.ndarray          # blended alpha, 0 where not blended
    trans: np.ndarray          # transmittance before each splat
    in_cut: np.ndarray
    clamped: np.ndarray        # raw alpha above ALPHA_MAX
    blended: np.ndarray
    final_trans: np.ndarray    # (P,)

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1


@dataclass(eq=False)
class ContributionLog:
    width: int
    height: int
    tiles: list[TileRecord]

    def tile_for_pixel(self, x: int, y: int) -> TileRecord:
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise InvalidParameterError(f"pixel ({x}, {y}) outside the image")
        for tile in self.tiles:
            if tile.contains(x, y):
                return tile
        raise InvalidParameterError(f"pixel ({x}, {y}) outside the image")


@dataclass(eq=False)
class RenderOutput:
    image: np.ndarray                  # (H, W, 3)
    final_transmittance: np.ndarray    # (H, W)
    contribution_log: ContributionLog
    batch: ViewBatch
    background: np.ndarray

    def pixel_log(self, x: int, y: int) -> list[tuple[int, float, float]]:
        """(cloud row, alpha, transmittance before) for every blended splat at pixel (x, y)."""
        tile = self.contribution_log.tile_for_pixel(x, y)
        p = (y - tile.y0) * tile.width + (x - tile.x0)
        rows = np.flatnonzero(tile.blended[:, p])
        return [
            (int(self.batch.index[tile.splats[k]]), float(tile.alpha[k, p]), float(tile.trans[k, p]))
            for k in rows
        ]

    def branch_signature(self) -> str:
        """Digest of every discrete decision the forward pass took.

        Two renders with equal signatures lie on the same smooth piece of the
        image function: same visible set, order, cutoff, clamp and early-stop masks.
        """
        h = hashlib.sha256()
        h.update(self.batch.index.astype(np.int64).tobytes())
        h.update(np.ascontiguousarray(self.batch.color_raw > 0).tobytes())
        for tile in self.contribution_log.tiles:
            h.update(tile.splats.astype(np.int64).tobytes())
            for mask in (tile.in_cut, tile.clamped & tile.in_cut, tile.blended):
                h.update(np.packbits(mask).tobytes())
        return h.hexdigest()


def _exclusive_cumprod(one_minus: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Transmittance before each row and after the last one."""
    full = np.cumprod(one_minus, axis=0)
    before = np.empty_like(one_minus)
    before[0] = 1.0
    before[1:] = full[:-1]
    return before, full[-1]


def _rasterize_tile(
    batch: ViewBatch, bounds: tuple[int, int, int, int], background: np.ndarray
) -> tuple[np.ndarray, np.ndarray, TileRecord]:
    x0, x1, y0, y1 = bounds
    xs = np.arange(x0, x1, dtype=np.float64) + 0.5
    ys = np.arange(y0, y1, dtype=np.float64) + 0.5
    px = np.tile(xs, y1 - y0)
    py = np.repeat(ys, x1 - x0)
    n_pix = px.shape[0]

    mx, my, r = batch.mean2d[:, 0], batch.mean2d[:, 1], batch.radius
    hit = (mx + r >= xs[0]) & (mx - r <= xs[-1]) & (my + r >= ys[0]) & (my - r <= ys[-1])
    sel = np.flatnonzero(hit)

    dx = px[None, :] - mx[sel, None]
    dy = py[None, :] - my[sel, None]
    ca, cb, cc = (batch.conic[sel, i][:, None] for i in range(3))
    gauss = np.exp(-0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy))
    in_cut = dx * dx + dy * dy <= (r[sel, None]) ** 2
    raw = batch.opacity[sel, None] * gauss
    clamped = raw > ALPHA_MAX
    alpha = np.where(in_cut, np.minimum(raw, ALPHA_MAX), 0.0)

    if sel.size:
        trans, _ = _exclusive_cumprod(1.0 - alpha)
        blended = in_cut & (trans >= T_MIN)
        alpha = np.where(blended, alpha, 0.0)
        trans, final = _exclusive_cumprod(1.0 - alpha)
        rgb = ((alpha * trans)[:, :, None] * batch.color[sel, None, :]).sum(axis=0)
    else:
        blended = in_cut
        trans = np.zeros((0, n_pix))
        final = np.ones(n_pix)
        rgb = np.zeros((n_pix, 3))
    rgb = rgb + final[:, None] * background

    record = TileRecord(
        x0=x0, x1=x1, y0=y0, y1=y1, splats=sel, dx=dx, dy=dy, gauss=gauss, alpha=alpha, trans=trans,
        in_cut=in_cut, clamped=clamped, blended=blended, final_trans=final,
    )
    return rgb.reshape(y1 - y0, x1 - x0, 3), final.reshape(y1 - y0, x1 - x0), record


def tile_grid(width: int, height: int, tile_size: int) -> list[tuple[int, int, int, int]]:
    """(x0, x1, y0, y1) of every tile, row-major."""
    return [
        (x, min(x + tile_size, width), y, min(y + tile_size, height))
        for y in range(0, height, tile_size)
        for x in range(0, width, tile_size)
    ]


def rasterize(
    batch: ViewBatch,
    cam: Camera,
    *,
    background: np.ndarray | None = None,
    workers: int = 1,
    tile_size: int = DEFAULT_TILE_SIZE,
) -> RenderOutput:
    width, height = cam.resolution
    if width <= 0 or height <= 0:
        raise InvalidParameterError(f"resolution must be positive, got {cam.resolution}")
    if tile_size < 1 or workers < 1:
        raise InvalidParameterError("tile_size and workers must be >= 1")
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64).reshape(3)

    tiles = tile_grid(width, height, tile_size)

    def run(bounds: tuple[int, int, int, int]) -> tuple[np.ndarray, np.ndarray, TileRecord]:
        return _rasterize_tile(batch, bounds, bg)

    if workers > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, tiles))
    else:
        parts = [run(t) for t in tiles]

    image = np.empty((height, width, 3))
    final = np.empty((height, width))
    for (x0, x1, y0, y1), (rgb, t_final, _) in zip(tiles, parts):
        image[y0:y1, x0:x1] = rgb
        final[y0:y1, x0:x1] = t_final
    log = ContributionLog(width=width, height=height, tiles=[p[2] for p in parts])
    return RenderOutput(image=image, final_transmittance=final, contribution_log=log, batch=batch, background=bg)


def render(
    cloud: GaussianCloud,
    cam: Camera,
    plan: DropPlan | None = None,
    *,
    background: np.ndarray | Sequence[float] | None = None,
    workers: int = 1,
    tile_size: int = DEFAULT_TILE_SIZE,
) -> RenderOutput:
    """Render ``cloud`` from ``cam``; ``plan`` removes and compensates Gaussians."""
    if cam.width <= 0 or cam.height <= 0:
        raise InvalidParameterError(f"resolution must be positive, got {cam.resolution}")
    batch = prepare_view(cloud, cam, plan)
    bg = None if background is None else np.asarray(background, dtype=np.float64)
    return rasterize(batch, cam, background=bg, workers=workers, tile_size=tile_size)
