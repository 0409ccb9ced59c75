"""Domain types and closed-form Gaussian math shared by every other module.

Conventions used throughout the engine:

* quaternions are (w, x, y, z) and treated as normalized; any function
  consuming a quaternion normalizes defensively so gradients through the
  normalization stay exact,
* scales are stored as logarithms and exponentiated on use,
* opacity is stored as a logit and squashed with a sigmoid on use,
* camera poses map world points into camera coordinates (x_cam = R x + t),
* pixel (row i, col j) has its center at (x, y) = (j + 0.5, i + 0.5).

All arrays are float64 unless a caller explicitly passes something else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .errors import DimMismatch, SingularCovariance

# ---------------------------------------------------------------------------
# quaternion / rigid-transform helpers
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w,x,y,z) quaternion (normalized internally)."""
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    )


def quat_to_matrix_batch(q: np.ndarray) -> np.ndarray:
    """(N,4) quaternions -> (N,3,3) rotation matrices."""
    q = quat_normalize(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[:, 0, 1] = 2.0 * (x * y - w * z)
    R[:, 0, 2] = 2.0 * (x * z + w * y)
    R[:, 1, 0] = 2.0 * (x * y + w * z)
    R[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[:, 1, 2] = 2.0 * (y * z - w * x)
    R[:, 2, 0] = 2.0 * (x * z - w * y)
    R[:, 2, 1] = 2.0 * (y * z + w * x)
    R[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b, both (…,4) in (w,x,y,z)."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    """SO(3) exponential of a rotation vector (Rodrigues)."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        K = skew(w)
        return np.eye(3) + K + 0.5 * (K @ K)
    axis = w / theta
    K = skew(axis)
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


def rotvec_to_quat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        q = np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]])
        return quat_normalize(q)
    axis = w / theta
    return np.concatenate([[math.cos(0.5 * theta)], math.sin(0.5 * theta) * axis])


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    """Inverse of rotvec_to_matrix (log map)."""
    tr = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = math.acos(tr)
    if theta < 1e-9:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if abs(math.pi - theta) < 1e-6:
        # near-pi: axis from the symmetric part
        A = (R + np.eye(3)) * 0.5
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # fix signs from off-diagonals
        i = int(np.argmax(axis))
        s = np.sign(np.array([A[i, 0], A[i, 1], A[i, 2]]))
        s[s == 0] = 1.0
        axis = axis * s * np.sign(axis[i] if axis[i] != 0 else 1.0)
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * math.sin(theta)) * v


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


@dataclass(frozen=True)
class RigidTransform:
    """Rigid map x -> R x + t."""

    R: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def exp(xi: np.ndarray) -> "RigidTransform":
        """xi = (nu, omega): translation then rotation-vector tangent."""
        xi = np.asarray(xi, dtype=np.float64)
        return RigidTransform(rotvec_to_matrix(xi[3:6]), xi[0:3].copy())

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.R.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other (apply `other` first)."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def perturbed(self, xi: np.ndarray) -> "RigidTransform":
        """Left-multiplicative update Exp(xi) ∘ self."""
        return RigidTransform.exp(xi).compose(self)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureGaussian:
    """Anisotropic 3D primitive carrying appearance and a knowledge feature.

    mu            world-space mean in meters
    scale         per-axis log-scales; exp(scale) are the ellipsoid semi-axes
    quat          unit quaternion (w,x,y,z)
    opacity_logit sigmoid(opacity_logit) is the opacity in (0,1)
    color         RGB in [0,1] (constant per primitive)
    feat          unit-normalized knowledge feature vector
    sem_id        semantic-cache entry index, or None
    """

    mu: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity_logit: float
    color: np.ndarray
    feat: np.ndarray
    sem_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64))
        q = np.asarray(self.quat, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-12:
            q = quat_normalize(q)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        f = np.asarray(self.feat, dtype=np.float64)
        n = np.linalg.norm(f)
        if n > 0 and abs(n - 1.0) > 1e-12:
            f = f / n
        object.__setattr__(self, "feat", f)

    @property
    def opacity(self) -> float:
        return 1.0 / (1.0 + math.exp(-self.opacity_logit))


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus a world→camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        R = self.pose.R
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8) or np.linalg.det(R) < 0:
            raise ValueError("pose rotation must be orthonormal with det +1")

    def with_pose(self, pose: RigidTransform) -> "Camera":
        return replace(self, pose=pose)

    def project_points(self, pts_world: np.ndarray):
        """World points -> (pixel xy (N,2), camera depth (N,))."""
        pc = self.pose.apply(pts_world)
        z = pc[:, 2]
        x = self.fx * pc[:, 0] / z + self.cx
        y = self.fy * pc[:, 1] / z + self.cy
        return np.stack([x, y], axis=-1), z

    def unproject_pixels(self, xy: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coordinates + camera depth -> world points."""
        xy = np.asarray(xy, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        xc = (xy[:, 0] - self.cx) / self.fx * depth
        yc = (xy[:, 1] - self.cy) / self.fy * depth
        cam = np.stack([xc, yc, depth], axis=-1)
        return self.pose.inverse().apply(cam)

    def pixel_centers(self) -> np.ndarray:
        """(H,W,2) array of pixel-center coordinates."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([xs + 0.5, ys + 0.5], axis=-1).astype(np.float64)


@dataclass
class FrameObservation:
    """One unit of streaming input.

    rgb          H×W×3 in [0,1]
    feature_map  H×W×D_sem semantic feature map, unit rows (zero = no knowledge)
    pointmap     optional H×W×3 camera-frame points
    confidence   optional H×W in [0,1]
    inv_depth    optional H×W inverse depth (>= 0, 0 = invalid)
    pose_prior   optional world→camera pose
    """

    index: int
    rgb: np.ndarray
    feature_map: np.ndarray
    pointmap: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None
    inv_depth: Optional[np.ndarray] = None
    pose_prior: Optional[RigidTransform] = None

    def validate(self) -> None:
        h, w = self.rgb.shape[:2]
        if self.rgb.shape != (h, w, 3):
            raise DimMismatch(f"rgb must be HxWx3, got {self.rgb.shape}")
        if self.feature_map.shape[:2] != (h, w):
            raise DimMismatch(
                f"feature_map {self.feature_map.shape} does not share rgb raster {h}x{w}"
            )
        for name in ("pointmap", "confidence", "inv_depth"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[:2] != (h, w):
                raise DimMismatch(f"{name} {arr.shape} does not share rgb raster {h}x{w}")
        if self.confidence is not None:
            if self.confidence.min() < -1e-9 or self.confidence.max() > 1 + 1e-9:
                raise ValueError("confidence must lie in [0,1]")

    @property
    def shape(self):
        return self.rgb.shape[:2]


@dataclass
class EngineConfig:
    """All run-time knobs of the engine.

    Loss weights and the three decision thresholds follow the published
    defaults; everything else is artifact plumbing with values chosen for
    deterministic desk-scale runs.
    """

    # loss weights
    lambda1: float = 0.25
    lambda2: float = 0.1
    lambda3: float = 0.15
    # decision thresholds
    theta_cache: float = 0.6
    zeta_prune: float = 2e-4
    rho_odo: float = 0.7
    # per-frame iteration counts
    motion_steps: int = 100
    refine_steps: int = 100
    # feature dimensionality of the integrated map (semantic block + 3 geometry channels)
    feature_dim: int = 16
    # per-group learning rates (mean rate is multiplied by the scene diameter)
    lr_mean: float = 1.6e-4
    lr_scale: float = 1e-3
    lr_quat: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_feat: float = 2.5e-3
    lr_pose: float = 1e-4
    # lifecycle
    stale_horizon: int = 10
    split_grad_threshold: float = 2e-4
    # fraction of refinement steps spent replaying already-seen frames
    # (the joint loss sums over all frames up to now; replay is its
    # deterministic round-robin schedule and never touches future frames)
    replay_fraction: float = 0.5
    replay_window: int = 0  # 0 = entire history
    init_voxel_size: float = 0.01
    init_knn: int = 3
    init_opacity: float = 0.1
    new_area_alpha: float = 0.5
    # odometry
    window_size: int = 8
    huber_px: float = 2.0
    lm_max_iters: int = 20
    keypoint_stride: int = 8
    min_backproject_conf: float = 0.2
    # semantics
    warp_beta: float = 0.3
    match_tau: float = 0.07
    match_radius: int = 16
    mask_smooth_k: int = 8
    # rendering
    near_plane: float = 0.01
    tile_size: int = 16
    # streaming
    holdout_every: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("theta_cache", "zeta_prune", "rho_odo"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie in (0,1), got {v}")
        if self.motion_steps < 1 or self.refine_steps < 1:
            raise ValueError("step counts must be >= 1")

    @staticmethod
    def from_mapping(kv: dict) -> "EngineConfig":
        known = {f.name: f.type for f in fields(EngineConfig)}
        kwargs = {}
        for key, raw in kv.items():
            if key not in known:
                raise KeyError(f"unknown config key: {key}")
            default = getattr(EngineConfig(), key)
            kwargs[key] = type(default)(raw)
        return EngineConfig(**kwargs)


class GaussianArrays:
    """Struct-of-arrays view of a set of FeatureGaussians.

    This is the layout every numeric kernel consumes. sem_id uses -1 for
    "unassigned". Arrays are owned; mutate only through a single writer.
    """

    __slots__ = ("mu", "scale", "quat", "opacity_logit", "color", "feat", "sem_id")

    def __init__(self, mu, scale, quat, opacity_logit, color, feat, sem_id=None):
        self.mu = np.ascontiguousarray(mu, dtype=np.float64)
        self.scale = np.ascontiguousarray(scale, dtype=np.float64)
        self.quat = np.ascontiguousarray(quat, dtype=np.float64)
        self.opacity_logit = np.ascontiguousarray(opacity_logit, dtype=np.float64)
        self.color = np.ascontiguousarray(color, dtype=np.float64)
        self.feat = np.ascontiguousarray(feat, dtype=np.float64)
        n = self.mu.shape[0]
        if sem_id is None:
            sem_id = np.full(n, -1, dtype=np.int64)
        self.sem_id = np.ascontiguousarray(sem_id, dtype=np.int64)

    def __len__(self):
        return self.mu.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.feat.shape[1]

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @staticmethod
    def empty(feat_dim: int) -> "GaussianArrays":
        return GaussianArrays(
            np.zeros((0, 3)),
            np.zeros((0, 3)),
            np.zeros((0, 4)),
            np.zeros(0),
            np.zeros((0, 3)),
            np.zeros((0, feat_dim)),
            np.zeros(0, dtype=np.int64),
        )

    @staticmethod
    def from_list(gaussians) -> "GaussianArrays":
        if len(gaussians) == 0:
            return GaussianArrays.empty(0)
        return GaussianArrays(
            np.stack([g.mu for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.stack([g.quat for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            np.stack([g.feat for g in gaussians]),
            np.array([-1 if g.sem_id is None else g.sem_id for g in gaussians], dtype=np.int64),
        )

    def to_list(self):
        out = []
        for i in range(len(self)):
            out.append(
                FeatureGaussian(
                    self.mu[i],
                    self.scale[i],
                    self.quat[i],
                    float(self.opacity_logit[i]),
                    self.color[i],
                    self.feat[i],
                    None if self.sem_id[i] < 0 else int(self.sem_id[i]),
                )
            )
        return out

    def copy(self) -> "GaussianArrays":
        return GaussianArrays(
            self.mu.copy(),
            self.scale.copy(),
            self.quat.copy(),
            self.opacity_logit.copy(),
            self.color.copy(),
            self.feat.copy(),
            self.sem_id.copy(),
        )

    def subset(self, idx) -> "GaussianArrays":
        return GaussianArrays(
            self.mu[idx],
            self.scale[idx],
            self.quat[idx],
            self.opacity_logit[idx],
            self.color[idx],
            self.feat[idx],
            self.sem_id[idx],
        )

    def concat(self, other: "GaussianArrays") -> "GaussianArrays":
        return GaussianArrays(
            np.concatenate([self.mu, other.mu]),
            np.concatenate([self.scale, other.scale]),
            np.concatenate([self.quat, other.quat]),
            np.concatenate([self.opacity_logit, other.opacity_logit]),
            np.concatenate([self.color, other.color]),
            np.concatenate([self.feat, other.feat]),
            np.concatenate([self.sem_id, other.sem_id]),
        )


def as_arrays(gaussians) -> GaussianArrays:
    """Accept a GaussianArrays, an object exposing .arrays, or a list."""
    if isinstance(gaussians, GaussianArrays):
        return gaussians
    arrays = getattr(gaussians, "arrays", None)
    if isinstance(arrays, GaussianArrays):
        return arrays
    return GaussianArrays.from_list(list(gaussians))


# ---------------------------------------------------------------------------
# closed-form Gaussian math
# ---------------------------------------------------------------------------

MIN_LOG_SCALE = math.log(1e-6)


def covariance(g: FeatureGaussian) -> np.ndarray:
    """World covariance R S Sᵀ Rᵀ of one primitive."""
    R = quat_to_matrix(g.quat)
    s = np.exp(g.scale)
    P = R * s[None, :]
    return P @ P.T


def eval_density(g: FeatureGaussian, x: np.ndarray) -> float:
    """exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ)) ∈ (0, 1]."""
    d = np.asarray(x, dtype=np.float64) - g.mu
    cov = covariance(g)
    try:
        sol = np.linalg.solve(cov, d)
    except np.linalg.LinAlgError as e:
        raise SingularCovariance(str(e)) from e
    if not np.all(np.isfinite(sol)):
        raise SingularCovariance("covariance solve produced non-finite values")
    m = float(d @ sol)
    return math.exp(-0.5 * m)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p) - np.log1p(-p)
