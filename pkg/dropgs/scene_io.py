"""Scene manifests, images, cloud files and the synthetic sparse-view generator.

On disk a scene is a directory holding ``scene.json`` and the PNG images it
references (8-bit sRGB). In memory images are linear float in [0, 1].
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import imageio.v3 as iio
import numpy as np
from pydantic import BaseModel, Field, ValidationError
from scipy.spatial import KDTree

from .camera import Camera
from .errors import InvalidParameterError, SceneFileMissingError, SceneFormatError
from .gaussians import GaussianCloud, inverse_sigmoid, normalize_quaternion, rgb_to_sh_dc, sh_basis_count, sh_dc_to_rgb
from .renderer import render
from .train_config import SyntheticSceneConfig

logger = logging.getLogger(__name__)

MANIFEST_NAME = "scene.json"
IMAGE_DIR = "images"
INIT_OPACITY = 0.1
MIN_NN_DIST2 = 1e-7
EXTENT_MARGIN = 1.1


# =============================================================================
# Color conversion and images
# =============================================================================


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def write_image(path: Path, linear: np.ndarray) -> None:
    """Quantize a linear image to an 8-bit sRGB PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    encoded = np.round(linear_to_srgb(linear) * 255.0).astype(np.uint8)
    iio.imwrite(path, encoded)


def read_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise SceneFileMissingError(path)
    data = np.asarray(iio.imread(path))
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    if data.ndim != 3 or data.shape[2] not in (3, 4):
        raise SceneFormatError(f"{path}: unsupported image shape {data.shape}")
    return srgb_to_linear(data[:, :, :3].astype(np.float64) / 255.0)


# =============================================================================
# Manifest models
# =============================================================================


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class CameraRecord(BaseModel):
    name: str = ""
    focal: list[float] = Field(min_length=2, max_length=2)
    principal: list[float] = Field(min_length=2, max_length=2)
    resolution: list[int] = Field(min_length=2, max_length=2)
    rotation_w2c: list[float] = Field(min_length=9, max_length=9)   # row-major
    translation: list[float] = Field(min_length=3, max_length=3)
    near_clip: float = 0.01
    split: Split
    image_path: str


class PointRecord(BaseModel):
    xyz: list[float] = Field(min_length=3, max_length=3)
    rgb: list[float] = Field(min_length=3, max_length=3)


class SceneManifest(BaseModel):
    cameras: list[CameraRecord]
    scene_extent: float = Field(gt=0)
    points: list[PointRecord] | None = None


class GaussianRecord(BaseModel):
    center: list[float] = Field(min_length=3, max_length=3)
    log_scale: list[float] = Field(min_length=3, max_length=3)
    rotation: list[float] = Field(min_length=4, max_length=4)
    opacity_logit: float
    sh: list[list[float]] = Field(min_length=3, max_length=3)   # 3 x B


class CloudFile(BaseModel):
    sh_degree: int = Field(ge=0, le=2)
    gaussians: list[GaussianRecord]


# =============================================================================
# Scene bundle
# =============================================================================


@dataclass(eq=False)
class SceneView:
    camera: Camera
    image: np.ndarray       # (H, W, 3) linear
    split: Split


@dataclass(eq=False)
class SceneBundle:
    views: list[SceneView]
    scene_extent: float
    point_xyz: np.ndarray | None = None     # (M, 3)
    point_rgb: np.ndarray | None = None     # (M, 3)
    extra: dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for view in self.views:
            expected = (view.camera.height, view.camera.width, 3)
            if view.image.shape != expected:
                raise SceneFormatError(
                    f"camera {view.camera.name!r}: image shape {view.image.shape}, expected {expected}"
                )
        if self.scene_extent <= 0:
            raise SceneFormatError(f"scene extent must be > 0, got {self.scene_extent}")

    def split(self, split: Split | str) -> list[SceneView]:
        split = Split(split)
        return [v for v in self.views if v.split == split]

    @property
    def has_points(self) -> bool:
        return self.point_xyz is not None and len(self.point_xyz) > 0


def _camera_record(view: SceneView, image_path: str) -> CameraRecord:
    cam = view.camera
    return CameraRecord(
        name=cam.name,
        focal=cam.focal.tolist(),
        principal=cam.principal_point.tolist(),
        resolution=list(cam.resolution),
        rotation_w2c=cam.rotation_w2c.reshape(9).tolist(),
        translation=cam.translation_w2c.tolist(),
        near_clip=cam.near_clip,
        split=view.split,
        image_path=image_path,
    )


def save_scene(bundle: SceneBundle, directory: Path) -> Path:
    """Write the manifest and PNG images; returns the manifest path."""
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, view in enumerate(bundle.views):
        name = view.camera.name or f"view_{i:03d}"
        rel = f"{IMAGE_DIR}/{name}.png"
        write_image(directory / rel, view.image)
        records.append(_camera_record(view, rel))
    points = None
    if bundle.has_points:
        assert bundle.point_xyz is not None and bundle.point_rgb is not None
        points = [
            PointRecord(xyz=p.tolist(), rgb=c.tolist()) for p, c in zip(bundle.point_xyz, bundle.point_rgb)
        ]
    manifest = SceneManifest(cameras=records, scene_extent=bundle.scene_extent, points=points)
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=1), encoding="utf-8")
    logger.info("Scene saved to %s (%d views)", path, len(records))
    return path


def load_scene(path: Path) -> SceneBundle:
    """Load a scene from its manifest file or the directory containing it."""
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.is_file():
        raise SceneFileMissingError(manifest_path)
    try:
        manifest = SceneManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise SceneFormatError(f"{manifest_path}: {e}") from e

    root = manifest_path.parent
    views = []
    for rec in manifest.cameras:
        try:
            cam = Camera(
                focal=np.array(rec.focal),
                principal_point=np.array(rec.principal),
                resolution=(rec.resolution[0], rec.resolution[1]),
                rotation_w2c=np.array(rec.rotation_w2c).reshape(3, 3),
                translation_w2c=np.array(rec.translation),
                near_clip=rec.near_clip,
                name=rec.name,
            )
        except InvalidParameterError as e:
            raise SceneFormatError(f"camera {rec.name!r}: {e}") from e
        image = read_image(root / rec.image_path)
        if image.shape[:2] != (cam.height, cam.width):
            raise SceneFormatError(
                f"{rec.image_path}: resolution {image.shape[1]}x{image.shape[0]} "
                f"does not match camera {cam.width}x{cam.height}"
            )
        views.append(SceneView(camera=cam, image=image, split=rec.split))

    xyz = rgb = None
    if manifest.points:
        xyz = np.array([p.xyz for p in manifest.points], dtype=np.float64)
        rgb = np.array([p.rgb for p in manifest.points], dtype=np.float64)
    logger.info("Scene loaded from %s (%d views)", manifest_path, len(views))
    return SceneBundle(views=views, scene_extent=manifest.scene_extent, point_xyz=xyz, point_rgb=rgb)


# =============================================================================
# Cloud files
# =============================================================================


def save_cloud(cloud: GaussianCloud, path: Path) -> None:
    records = [
        GaussianRecord(
            center=cloud.centers[i].tolist(),
            log_scale=cloud.log_scales[i].tolist(),
            rotation=cloud.rotations[i].tolist(),
            opacity_logit=float(cloud.opacity_logits[i]),
            sh=cloud.sh_coeffs[i].tolist(),
        )
        for i in range(len(cloud))
    ]
    doc = CloudFile(sh_degree=cloud.sh_degree, gaussians=records)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc.model_dump(mode="json")), encoding="utf-8")


def load_cloud(path: Path) -> GaussianCloud:
    if not path.is_file():
        raise SceneFileMissingError(path)
    try:
        doc = CloudFile.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise SceneFormatError(f"{path}: {e}") from e
    if not doc.gaussians:
        return GaussianCloud.empty(doc.sh_degree)
    n_basis = sh_basis_count(doc.sh_degree)
    if any(len(row) != n_basis for g in doc.gaussians for row in g.sh):
        raise SceneFormatError(f"{path}: SH rows must have {n_basis} coefficients for degree {doc.sh_degree}")
    return GaussianCloud(
        centers=np.array([g.center for g in doc.gaussians]),
        log_scales=np.array([g.log_scale for g in doc.gaussians]),
        rotations=np.array([g.rotation for g in doc.gaussians]),
        opacity_logits=np.array([g.opacity_logit for g in doc.gaussians]),
        sh_coeffs=np.array([g.sh for g in doc.gaussians]),
    )


# =============================================================================
# Initialization
# =============================================================================


def nearest_neighbor_scales(points: np.ndarray, fallback: float) -> np.ndarray:
    """sqrt of the mean squared distance to the 3 nearest other points."""
    n = points.shape[0]
    if n <= 1:
        return np.full(n, fallback)
    k = min(4, n)
    dist, _ = KDTree(points).query(points, k=k)
    dist2 = np.maximum((dist[:, 1:] ** 2).mean(axis=1), MIN_NN_DIST2)
    return np.sqrt(dist2)


def _cloud_from_points(xyz: np.ndarray, dc_rgb: np.ndarray | None, extent: float, sh_degree: int) -> GaussianCloud:
    n = xyz.shape[0]
    scales = nearest_neighbor_scales(xyz, 0.01 * extent)
    sh = np.zeros((n, 3, sh_basis_count(sh_degree)))
    if dc_rgb is not None:
        sh[:, :, 0] = rgb_to_sh_dc(dc_rgb)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        centers=xyz.copy(),
        log_scales=np.repeat(np.log(scales)[:, None], 3, axis=1),
        rotations=rotations,
        opacity_logits=np.full(n, float(inverse_sigmoid(INIT_OPACITY))),
        sh_coeffs=sh,
    )


def init_cloud(
    bundle: SceneBundle, strategy: str, n: int, rng: np.random.Generator, sh_degree: int = 1
) -> GaussianCloud:
    """Initial cloud from the bundle's points or uniformly inside the extent box."""
    if strategy == "from_points":
        if not bundle.has_points:
            raise InvalidParameterError("from_points initialization needs initial points in the scene")
        assert bundle.point_xyz is not None
        return _cloud_from_points(bundle.point_xyz, bundle.point_rgb, bundle.scene_extent, sh_degree)
    if strategy == "random":
        if n <= 0:
            raise InvalidParameterError(f"random initialization needs n > 0, got {n}")
        e = bundle.scene_extent
        xyz = rng.uniform(-e, e, size=(n, 3))
        return _cloud_from_points(xyz, None, e, sh_degree)
    raise InvalidParameterError(f"unknown init strategy {strategy!r}")


# =============================================================================
# Synthetic scenes
# =============================================================================


def _sample_cluster(
    cfg: SyntheticSceneConfig, rng: np.random.Generator, n: int, center: np.ndarray, tint: np.ndarray
) -> GaussianCloud:
    b = sh_basis_count(cfg.sh_degree)
    centers = center + rng.normal(scale=cfg.cluster_spread, size=(n, 3))
    scales = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=(n, 3))
    rotations = normalize_quaternion(rng.normal(size=(n, 4)))
    opacity = rng.uniform(cfg.opacity_range[0], cfg.opacity_range[1], size=n)
    rgb = np.clip(tint + rng.uniform(-0.25, 0.25, size=(n, 3)), 0.1, 0.9)
    sh = np.zeros((n, 3, b))
    sh[:, :, 0] = rgb_to_sh_dc(rgb)
    return GaussianCloud(centers, np.log(scales), rotations, inverse_sigmoid(opacity), sh)


def generate_synthetic_scene(
    cfg: SyntheticSceneConfig, rng: np.random.Generator
) -> tuple[SceneBundle, GaussianCloud]:
    """A near and a far cluster of colored blobs seen from cameras on an arc.

    Train views are spread evenly among the arc positions; the rest are test
    views. Images are rendered from the ground-truth cloud with this renderer.
    """
    cfg.validate()
    near = _sample_cluster(cfg, rng, cfg.n_near, np.array([0.0, 0.0, -cfg.near_offset]), rng.uniform(0.3, 0.7, 3))
    far = _sample_cluster(cfg, rng, cfg.n_far, np.array([0.0, 0.0, cfg.far_offset]), rng.uniform(0.3, 0.7, 3))
    truth = near.concat(far)
    extent = EXTENT_MARGIN * max(float(np.abs(truth.centers).max()), 1e-3)

    n_views = cfg.n_train + cfg.n_test
    angles = np.deg2rad(np.linspace(-cfg.arc_deg / 2.0, cfg.arc_deg / 2.0, n_views))
    if cfg.n_train == 1:
        train_pos = {n_views // 2}
    else:
        train_pos = set(np.round(np.linspace(0, n_views - 1, cfg.n_train)).astype(int).tolist())
    if len(train_pos) != cfg.n_train:
        raise InvalidParameterError("too many train views for the arc positions")

    views = []
    for i, theta in enumerate(angles):
        eye = cfg.camera_distance * np.array([np.sin(theta), 0.0, -np.cos(theta)])
        eye[1] = -0.15 * cfg.camera_distance
        cam = Camera.look_at(
            eye, np.zeros(3), np.array([0.0, -1.0, 0.0]),
            width=cfg.width, height=cfg.height, fov_x_deg=cfg.fov_deg, name=f"view_{i:03d}",
        )
        image = np.clip(render(truth, cam, background=cfg.background).image, 0.0, 1.0)
        views.append(SceneView(camera=cam, image=image, split=Split.TRAIN if i in train_pos else Split.TEST))

    picks = rng.integers(0, len(truth), size=cfg.n_init_points)
    xyz = truth.centers[picks] + rng.normal(scale=cfg.point_noise, size=(cfg.n_init_points, 3))
    rgb = np.clip(sh_dc_to_rgb(truth.sh_coeffs[picks, :, 0]), 0.0, 1.0)

    bundle = SceneBundle(views=views, scene_extent=extent, point_xyz=xyz, point_rgb=rgb)
    logger.debug("synthetic scene: %d Gaussians, %d views, extent %.3f", len(truth), n_views, extent)
    return bundle, truth


def random_check_scene(
    n: int, size: int, rng: np.random.Generator, sh_degree: int = 1
) -> tuple[GaussianCloud, Camera]:
    """Small random cloud in front of a random camera, for gradient checks."""
    b = sh_basis_count(sh_degree)
    eye = rng.normal(size=3)
    eye *= 3.0 / np.linalg.norm(eye)
    cam = Camera.look_at(eye, np.zeros(3), np.array([0.0, 0.0, 1.0]) + 0.1 * rng.normal(size=3),
                         width=size, height=size, fov_x_deg=50.0)
    cloud = GaussianCloud(
        centers=rng.uniform(-0.6, 0.6, size=(n, 3)),
        log_scales=np.log(rng.uniform(0.08, 0.25, size=(n, 3))),
        rotations=normalize_quaternion(rng.normal(size=(n, 4))),
        opacity_logits=inverse_sigmoid(rng.uniform(0.2, 0.8, size=n)),
        sh_coeffs=rng.normal(scale=0.3, size=(n, 3, b)),
    )
    return cloud, cam
