"""
Gaussian primitives, cameras, 3D smoothing and screen-space projection.

Pixel convention: pixel (row i, column j) has its centre at continuous image
coordinates (j + 0.5, i + 0.5). Camera coordinates are +z forward, +x right,
+y down, so a point on the optical axis projects onto the principal point.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from splat_models import CoreConfig

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-9


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """
    Rotation matrices from (w, x, y, z) quaternions.

    Accepts shape (4,) or (N, 4); quaternions are normalized first.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return rot.reshape(q.shape[:-1] + (3, 3))


def rotation_to_quaternion(rot: np.ndarray) -> np.ndarray:
    """Unit (w, x, y, z) quaternion of a 3x3 rotation matrix."""
    m = np.asarray(rot, dtype=np.float64)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0:
        s = 2.0 * np.sqrt(trace + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q / np.linalg.norm(q)


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b of (w, x, y, z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


@dataclass(frozen=True, eq=False)
class Gaussian3D:
    """One splat primitive with activated parameters."""
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity: float

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(3))
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        object.__setattr__(self, "rotation", q / np.linalg.norm(q))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))
        object.__setattr__(self, "opacity", float(self.opacity))
        if np.any(self.scale <= 0):
            raise ValueError(f"Gaussian scale must be strictly positive, got {self.scale}")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError(f"Gaussian color must lie in [0, 1], got {self.color}")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"Gaussian opacity must lie in [0, 1], got {self.opacity}")

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quaternion_to_rotation(self.rotation)

    @property
    def covariance(self) -> np.ndarray:
        rot = self.rotation_matrix
        return rot @ np.diag(self.scale ** 2) @ rot.T


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with a world-to-camera rigid transform."""
    focal: np.ndarray
    principal_point: np.ndarray
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    view_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "focal", np.asarray(self.focal, dtype=np.float64).reshape(2))
        object.__setattr__(self, "principal_point", np.asarray(self.principal_point, dtype=np.float64).reshape(2))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if np.any(self.focal <= 0):
            raise ValueError(f"Focal lengths must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Image size must be at least 1x1, got {self.width}x{self.height}")
        rot = self.rotation
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > ORTHONORMAL_TOL or abs(np.linalg.det(rot) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("Camera rotation must be orthonormal with determinant +1")

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float],
        up: Sequence[float],
        focal: float,
        width: int,
        height: int,
        view_id: str = "",
    ) -> "Camera":
        """Camera at `eye` looking at `target`, principal point at the image centre."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        # re-orthonormalize so the 1e-9 invariant holds after float noise
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
        return cls(
            focal=(focal, focal),
            principal_point=(width / 2.0, height / 2.0),
            width=width,
            height=height,
            rotation=rot,
            translation=-rot @ eye,
            view_id=view_id,
        )

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def scaled(self, factor: float) -> "Camera":
        """Same pose with intrinsics and image size multiplied by `factor`."""
        return Camera(
            focal=self.focal * factor,
            principal_point=self.principal_point * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
            rotation=self.rotation,
            translation=self.translation,
            view_id=self.view_id,
        )

    def to_camera_space(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class Projected2D:
    """Screen-space footprint of one Gaussian."""
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    visible: bool


@dataclass(eq=False)
class GaussianScene:
    """
    Struct-of-arrays set of Gaussians.

    filter_sigmas holds the per-Gaussian 3D smoothing sigma (zeros when the
    scene has never been fitted to cameras).
    """
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    filter_sigmas: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        if self.filter_sigmas is None:
            self.filter_sigmas = np.zeros(n)
        else:
            self.filter_sigmas = np.asarray(self.filter_sigmas, dtype=np.float64).reshape(n)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D]) -> "GaussianScene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            positions=np.stack([g.position for g in gaussians]),
            scales=np.stack([g.scale for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            colors=np.stack([g.color for g in gaussians]),
            opacities=np.array([g.opacity for g in gaussians]),
        )

    def gaussian(self, index: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[index],
            scale=self.scales[index],
            rotation=self.rotations[index],
            color=self.colors[index],
            opacity=self.opacities[index],
        )

    def to_gaussians(self) -> List[Gaussian3D]:
        return [self.gaussian(i) for i in range(len(self))]

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.positions.copy(), self.scales.copy(), self.rotations.copy(),
            self.colors.copy(), self.opacities.copy(), self.filter_sigmas.copy(),
        )

    def subset(self, keep: np.ndarray) -> "GaussianScene":
        return GaussianScene(
            self.positions[keep], self.scales[keep], self.rotations[keep],
            self.colors[keep], self.opacities[keep], self.filter_sigmas[keep],
        )

    def append(self, other: "GaussianScene") -> "GaussianScene":
        return GaussianScene(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.scales, other.scales]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.colors, other.colors]),
            np.concatenate([self.opacities, other.opacities]),
            np.concatenate([self.filter_sigmas, other.filter_sigmas]),
        )

    def covariances(self) -> np.ndarray:
        rot = quaternion_to_rotation(self.rotations) if len(self) else np.zeros((0, 3, 3))
        return np.einsum("nij,nj,nkj->nik", rot, self.scales ** 2, rot)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.positions, self.scales, self.rotations, self.colors, self.opacities, self.filter_sigmas):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()


def evaluate_density(g: Gaussian3D, x: Sequence[float]) -> float:
    """Unnormalized Gaussian density exp(-1/2 (x-mu)^T Sigma^-1 (x-mu))."""
    d = np.asarray(x, dtype=np.float64) - g.position
    # Sigma^-1 = R diag(1/s^2) R^T, so work in the local frame
    local = g.rotation_matrix.T @ d
    return float(np.exp(-0.5 * np.sum((local / g.scale) ** 2)))


def smoothed_scales(scales: np.ndarray, opacities: np.ndarray, sigmas: np.ndarray):
    """
    Vectorized 3D smoothing: Sigma + sigma^2 I keeps the rotation, so the
    effective scales are sqrt(s^2 + sigma^2) and the opacity is rescaled by
    sqrt(det Sigma / det Sigma') = prod(s / s').
    """
    sigmas = np.asarray(sigmas, dtype=np.float64).reshape(-1, 1)
    eff = np.sqrt(scales ** 2 + sigmas ** 2)
    factor = np.prod(scales / eff, axis=1)
    return eff, opacities * factor, factor


def apply_3d_smoothing(g: Gaussian3D, sigma_low: float) -> Gaussian3D:
    """Convolve `g` with an isotropic low-pass Gaussian, preserving integrated mass."""
    if sigma_low < 0:
        raise ValueError(f"sigma_low must be non-negative, got {sigma_low}")
    if sigma_low == 0:
        return g
    eff, opacity, _ = smoothed_scales(g.scale[None, :], np.array([g.opacity]), np.array([sigma_low]))
    return Gaussian3D(position=g.position, scale=eff[0], rotation=g.rotation, color=g.color, opacity=opacity[0])


def compute_sampling_sigma(g: Gaussian3D, cameras: Sequence[Camera], cfg: Optional[CoreConfig] = None,
                           near_plane: float = 0.01) -> float:
    """sigma_low = k / (max over cameras of focal / depth)."""
    cfg = cfg or CoreConfig()
    best_rate = 0.0
    for cam in cameras:
        z = float(cam.to_camera_space(g.position[None, :])[0, 2])
        if z <= near_plane:
            continue
        best_rate = max(best_rate, float(np.max(cam.focal)) / z)
    if best_rate == 0.0:
        return cfg.fallback_sigma
    return cfg.sampling_k / best_rate


def compute_filter_sigmas(scene: GaussianScene, cameras: Sequence[Camera], cfg: Optional[CoreConfig] = None,
                          near_plane: float = 0.01) -> np.ndarray:
    """compute_sampling_sigma for every Gaussian of a scene at once."""
    cfg = cfg or CoreConfig()
    best_rate = np.zeros(len(scene))
    for cam in cameras:
        z = cam.to_camera_space(scene.positions)[:, 2]
        in_front = z > near_plane
        rate = np.where(in_front, float(np.max(cam.focal)) / np.where(in_front, z, 1.0), 0.0)
        best_rate = np.maximum(best_rate, rate)
    seen = best_rate > 0
    sigmas = np.full(len(scene), cfg.fallback_sigma)
    sigmas[seen] = cfg.sampling_k / best_rate[seen]
    if np.any(~seen):
        logger.debug(f"{int(np.sum(~seen))} Gaussians behind every camera; using fallback sigma")
    return sigmas


@dataclass(eq=False)
class ProjectedScene:
    """Vectorized projection of a whole scene plus the intermediates the backward pass needs."""
    mean2d: np.ndarray        # (N, 2)
    cov2d: np.ndarray         # (N, 2, 2), dilated
    conic: np.ndarray         # (N, 2, 2), inverse of cov2d
    depth: np.ndarray         # (N,)
    visible: np.ndarray       # (N,) bool
    cam_points: np.ndarray    # (N, 3)
    jacobian: np.ndarray      # (N, 2, 3)
    cov3d: np.ndarray         # (N, 3, 3)
    rotation: np.ndarray      # (N, 3, 3) Gaussian rotations
    scales: np.ndarray        # (N, 3) effective scales
    opacities: np.ndarray     # (N,) effective opacities
    smoothing_factor: np.ndarray = field(default=None)


def project_scene(scene: GaussianScene, cam: Camera, smoothing: bool = False,
                  near_plane: float = 0.01, dilation: float = 0.3) -> ProjectedScene:
    """Project every Gaussian of `scene` into `cam` (EWA: cov2d = J W Sigma W^T J^T + dilation I)."""
    n = len(scene)
    if smoothing:
        scales, opacities, factor = smoothed_scales(scene.scales, scene.opacities, scene.filter_sigmas)
    else:
        scales, opacities, factor = scene.scales, scene.opacities, np.ones(n)
    rot = quaternion_to_rotation(scene.rotations) if n else np.zeros((0, 3, 3))
    cov3d = np.einsum("nij,nj,nkj->nik", rot, scales ** 2, rot)

    pc = cam.to_camera_space(scene.positions)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    visible = z > near_plane
    zs = np.where(visible, z, 1.0)
    fx, fy = cam.focal
    cx, cy = cam.principal_point

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * x / zs ** 2
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * y / zs ** 2

    t = jac @ cam.rotation
    cov2d = t @ cov3d @ np.transpose(t, (0, 2, 1))
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    visible &= det > 0
    dets = np.where(det > 0, det, 1.0)
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / dets
    conic[:, 1, 1] = cov2d[:, 0, 0] / dets
    conic[:, 0, 1] = -cov2d[:, 0, 1] / dets
    conic[:, 1, 0] = -cov2d[:, 1, 0] / dets

    mean2d = np.stack([fx * x / zs + cx, fy * y / zs + cy], axis=1)
    return ProjectedScene(
        mean2d=mean2d, cov2d=cov2d, conic=conic, depth=z, visible=visible,
        cam_points=pc, jacobian=jac, cov3d=cov3d, rotation=rot,
        scales=scales, opacities=opacities, smoothing_factor=factor,
    )


def project(g: Gaussian3D, cam: Camera, near_plane: float = 0.01, dilation: float = 0.3) -> Projected2D:
    """Screen-space mean, dilated covariance and depth of a single Gaussian."""
    proj = project_scene(GaussianScene.from_gaussians([g]), cam, near_plane=near_plane, dilation=dilation)
    return Projected2D(
        mean2d=proj.mean2d[0],
        cov2d=proj.cov2d[0],
        depth=float(proj.depth[0]),
        visible=bool(proj.visible[0]),
    )
