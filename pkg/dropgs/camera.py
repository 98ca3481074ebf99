"""Pinhole camera model.

World-to-camera convention follows OpenCV: x right, y down, z forward.
Pixel (x, y) is sampled at its center (x + 0.5, y + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

ORTHONORMAL_TOL = 1e-9
DEFAULT_NEAR_CLIP = 0.01


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole intrinsics plus a world-to-camera pose."""

    focal: np.ndarray              # (fx, fy) pixels
    principal_point: np.ndarray    # (cx, cy) pixels
    resolution: tuple[int, int]    # (width, height)
    rotation_w2c: np.ndarray       # 3x3
    translation_w2c: np.ndarray    # 3
    near_clip: float = DEFAULT_NEAR_CLIP
    name: str = field(default="")

    def __post_init__(self) -> None:
        focal = np.asarray(self.focal, dtype=np.float64).reshape(2)
        pp = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        rot = np.asarray(self.rotation_w2c, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation_w2c, dtype=np.float64).reshape(3)
        if not np.all(focal > 0):
            raise InvalidParameterError(f"focal must be positive, got {focal.tolist()}")
        if not np.allclose(rot @ rot.T, np.eye(3), rtol=0.0, atol=ORTHONORMAL_TOL):
            raise InvalidParameterError("rotation_w2c is not orthonormal")
        if not self.near_clip > 0:
            raise InvalidParameterError(f"near_clip must be > 0, got {self.near_clip}")
        width, height = (int(v) for v in self.resolution)
        if width < 0 or height < 0:
            raise InvalidParameterError(f"negative resolution {self.resolution}")
        object.__setattr__(self, "focal", focal)
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "rotation_w2c", rot)
        object.__setattr__(self, "translation_w2c", trans)
        object.__setattr__(self, "resolution", (width, height))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation_w2c.T @ self.translation_w2c

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        # Row-wise products keep each row independent of the batch it sits in.
        points = np.asarray(points, dtype=np.float64)
        return (points[..., None, :] * self.rotation_w2c).sum(axis=-1) + self.translation_w2c

    @classmethod
    def look_at(
        cls,
        eye: np.ndarray,
        target: np.ndarray,
        up: np.ndarray,
        *,
        width: int,
        height: int,
        fov_x_deg: float,
        near_clip: float = DEFAULT_NEAR_CLIP,
        name: str = "",
    ) -> Camera:
        """Camera at ``eye`` looking at ``target`` with square pixels."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(forward)
        if norm == 0:
            raise InvalidParameterError("eye and target coincide")
        z = forward / norm
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-12:
            raise InvalidParameterError("up vector is parallel to the view direction")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        fx = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2.0)
        return cls(
            focal=np.array([fx, fx]),
            principal_point=np.array([width / 2.0, height / 2.0]),
            resolution=(width, height),
            rotation_w2c=rot,
            translation_w2c=-rot @ eye,
            near_clip=near_clip,
            name=name,
        )
