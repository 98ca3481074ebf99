"""Gaussian parameterization, covariance construction, projection and SH color.

Parameters are stored unconstrained (log scale, opacity logit, raw quaternion)
and activated on use. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .camera import Camera
from .errors import InvalidParameterError

# Real spherical-harmonics normalization constants, bands 0..2.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_DC_OFFSET = 0.5
MAX_SH_DEGREE = 2

# Screen-space low-pass dilation added to every 2D covariance (pixels^2).
LOWPASS_EPS = 0.3

PARAM_FIELDS = ("centers", "log_scales", "rotations", "opacity_logits", "sh_coeffs")


def sigmoid(x: np.ndarray | float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(p: np.ndarray | float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def sh_basis_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_for(n_basis: int) -> int:
    """SH degree L for B = (L+1)^2 basis terms; only L in {0, 1, 2}."""
    for degree in range(MAX_SH_DEGREE + 1):
        if sh_basis_count(degree) == n_basis:
            return degree
    raise InvalidParameterError(f"unsupported number of SH basis terms: {n_basis}")


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - SH_DC_OFFSET) / SH_C0


def sh_dc_to_rgb(dc: np.ndarray) -> np.ndarray:
    return np.asarray(dc, dtype=np.float64) * SH_C0 + SH_DC_OFFSET


# ──────────────────────────────────────────────────────────────────────
# Rotations and covariances
# ──────────────────────────────────────────────────────────────────────


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InvalidParameterError("zero-norm quaternion")
    return q / norm


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of q/|q| for quaternions (w, x, y, z); shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(normalize_quaternion(q), -1, 0)
    rot = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return rot.reshape(rot.shape[:-1] + (3, 3))


def quat_rotation_jacobian(qn: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions ``qn``; shape (..., 3, 3, 4)."""
    w, x, y, z = np.moveaxis(np.asarray(qn, dtype=np.float64), -1, 0)
    zero = np.zeros_like(w)
    # Each entry lists (d/dw, d/dx, d/dy, d/dz) of the matching R entry.
    rows = [
        [zero, zero, -4 * y, -4 * z],
        [-2 * z, 2 * y, 2 * x, -2 * w],
        [2 * y, 2 * z, 2 * w, 2 * x],
        [2 * z, 2 * y, 2 * x, 2 * w],
        [zero, -4 * x, zero, -4 * z],
        [-2 * x, -2 * w, 2 * z, 2 * y],
        [-2 * y, 2 * z, -2 * w, 2 * x],
        [2 * x, 2 * w, 2 * z, 2 * y],
        [zero, -4 * x, -4 * y, zero],
    ]
    jac = np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)
    return jac.reshape(jac.shape[:-2] + (3, 3, 4))


def covariance_3d(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(log_scale))^2 R^T; batched over leading axes."""
    rot = quat_to_rotation(rotation)
    m = rot * np.exp(np.asarray(log_scale, dtype=np.float64))[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


# ──────────────────────────────────────────────────────────────────────
# Spherical harmonics
# ──────────────────────────────────────────────────────────────────────


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values Y_b(dir); shape (..., (degree+1)^2)."""
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise InvalidParameterError(f"unsupported SH degree {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    terms = [np.full_like(x, SH_C0)]
    if degree >= 1:
        terms += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        terms += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ]
    return np.stack(terms, axis=-1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Polynomial gradient dY_b/d(dir); shape (..., B, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [[zero, zero, zero]]
    if degree >= 1:
        c1 = np.full_like(x, SH_C1)
        rows += [[zero, -c1, zero], [zero, zero, c1], [-c1, zero, zero]]
    if degree >= 2:
        rows += [
            [SH_C2[0] * y, SH_C2[0] * x, zero],
            [zero, SH_C2[1] * z, SH_C2[1] * y],
            [-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z],
            [SH_C2[3] * z, zero, SH_C2[3] * x],
            [2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero],
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh_raw(sh_coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """0.5 + sum_b f_cb Y_b(dir) before the lower clamp; shape (..., 3)."""
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    degree = sh_degree_for(sh_coeffs.shape[-1])
    basis = sh_basis(dirs, degree)
    return SH_DC_OFFSET + (sh_coeffs * basis[..., None, :]).sum(axis=-1)


def eval_sh(sh_coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """View-dependent RGB, clamped below at 0 (no upper clamp)."""
    return np.maximum(eval_sh_raw(sh_coeffs, dirs), 0.0)


# ──────────────────────────────────────────────────────────────────────
# Single Gaussian
# ──────────────────────────────────────────────────────────────────────


@dataclass(eq=False)
class Gaussian:
    center: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray          # (3, B)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    def covariance(self) -> np.ndarray:
        return covariance_3d(self.log_scale, self.rotation)


def eval_gaussian(g: Gaussian, x: np.ndarray) -> float:
    """exp(-1/2 (x - mu)^T Sigma^-1 (x - mu))."""
    d = np.asarray(x, dtype=np.float64) - g.center
    # Sigma^-1 = R diag(s^-2) R^T
    local = quat_to_rotation(g.rotation).T @ d
    mahalanobis = float(np.sum((local / g.scale) ** 2))
    return float(np.exp(-0.5 * mahalanobis))


# ──────────────────────────────────────────────────────────────────────
# Cloud
# ──────────────────────────────────────────────────────────────────────


@dataclass(eq=False)
class GaussianCloud:
    """The learnable scene as a structure of arrays, one row per Gaussian."""

    centers: np.ndarray            # (N, 3)
    log_scales: np.ndarray         # (N, 3)
    rotations: np.ndarray          # (N, 4)
    opacity_logits: np.ndarray     # (N,)
    sh_coeffs: np.ndarray          # (N, 3, B)

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = self.centers.shape[0]
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[1] != 3:
            raise InvalidParameterError(f"sh_coeffs must have shape ({n}, 3, B), got {sh.shape}")
        sh_degree_for(sh.shape[2])
        self.sh_coeffs = sh

    def __len__(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def empty(cls, sh_degree: int = 1) -> GaussianCloud:
        b = sh_basis_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3, b)))

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian], sh_degree: int = 1) -> GaussianCloud:
        if not gaussians:
            return cls.empty(sh_degree)
        return cls(
            centers=np.stack([g.center for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians], dtype=np.float64),
            sh_coeffs=np.stack([g.sh_coeffs for g in gaussians]),
        )

    @property
    def sh_degree(self) -> int:
        return sh_degree_for(self.sh_coeffs.shape[2])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            center=self.centers[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i].copy(),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> GaussianCloud:
        return GaussianCloud(**{k: v.copy() for k, v in self.arrays().items()})

    def subset(self, index: np.ndarray) -> GaussianCloud:
        """Rows selected by an integer index or boolean mask, in order."""
        return GaussianCloud(**{k: v[index].copy() for k, v in self.arrays().items()})

    def concat(self, other: GaussianCloud) -> GaussianCloud:
        mine, theirs = self.arrays(), other.arrays()
        return GaussianCloud(**{k: np.concatenate([mine[k], theirs[k]]) for k in mine})


# ──────────────────────────────────────────────────────────────────────
# Projection
# ──────────────────────────────────────────────────────────────────────


@dataclass(eq=False)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    view_dir: np.ndarray


@dataclass(eq=False)
class ProjectedCloud:
    """Per-row projection results; rows with ``visible`` False are culled."""

    visible: np.ndarray        # (N,) bool
    t_cam: np.ndarray          # (N, 3) camera-frame centers
    depth: np.ndarray          # (N,)
    mean2d: np.ndarray         # (N, 2)
    cov2d: np.ndarray          # (N, 2, 2), dilated
    cov3d: np.ndarray          # (N, 3, 3)
    jacobian: np.ndarray       # (N, 2, 3) perspective Jacobian at t_cam
    view_dir: np.ndarray       # (N, 3) unit, camera -> Gaussian, world frame
    view_dist: np.ndarray      # (N,) |center - camera center|


def project_cloud(cloud: GaussianCloud, cam: Camera) -> ProjectedCloud:
    """Project every Gaussian with the local affine approximation of the pinhole map."""
    t = cam.world_to_camera(cloud.centers)
    depth = t[:, 2]
    visible = depth > cam.near_clip
    tz = np.where(visible, depth, 1.0)
    fx, fy = cam.focal
    cx, cy = cam.principal_point

    jac = np.zeros((len(cloud), 2, 3))
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * t[:, 0] / tz**2
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * t[:, 1] / tz**2

    cov3d = covariance_3d(cloud.log_scales, cloud.rotations) if len(cloud) else np.zeros((0, 3, 3))
    m = jac @ cam.rotation_w2c
    cov2d = m @ cov3d @ np.swapaxes(m, -1, -2) + LOWPASS_EPS * np.eye(2)
    # Exact symmetry for downstream eigen/inverse computations.
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2))

    mean2d = np.stack([fx * t[:, 0] / tz + cx, fy * t[:, 1] / tz + cy], axis=-1)
    offset = cloud.centers - cam.center
    dist = np.linalg.norm(offset, axis=-1)
    view_dir = offset / np.where(dist > 0, dist, 1.0)[:, None]
    return ProjectedCloud(
        visible=visible,
        t_cam=t,
        depth=depth,
        mean2d=mean2d,
        cov2d=cov2d,
        cov3d=cov3d,
        jacobian=jac,
        view_dir=view_dir,
        view_dist=dist,
    )


def project_gaussian(g: Gaussian, cam: Camera) -> Splat2D | None:
    """Project one Gaussian; None when it is culled by the near plane."""
    proj = project_cloud(GaussianCloud.from_gaussians([g], sh_degree_for(g.sh_coeffs.shape[1])), cam)
    if not proj.visible[0]:
        return None
    return Splat2D(
        mean2d=proj.mean2d[0],
        cov2d=proj.cov2d[0],
        depth=float(proj.depth[0]),
        view_dir=proj.view_dir[0],
    )
