"""EWA perspective projection of 3D Gaussians and its analytic adjoint.

Forward: a Gaussian (mu, Sigma) seen by a pinhole camera projects to a 2D
Gaussian with mean pi(R mu + t) and covariance J W Sigma Wt Jt + 0.3 I,
where J is the projection Jacobian at the camera-space mean and W the pose
rotation. The +0.3 px^2 diagonal term is the anti-aliasing floor; it also
makes every projected covariance safely invertible.

Backward: exact adjoints for the Gaussian parameters (mu, log-scales,
quaternion) and the camera's 6-DoF left tangent (nu, omega), meaning the
perturbed pose acts as x -> Exp(omega)(R x + t) + nu.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Camera, FeatureGaussian, GaussianArrays, quat_to_matrix_batch

COV2D_FLOOR = 0.3  # px^2 low-pass term


class _Culled:
    """Marker returned for Gaussians behind the near plane."""

    __slots__ = ()

    def __repr__(self):
        return "CULLED"


CULLED = _Culled()


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray  # pixel coordinates
    cov2d: np.ndarray  # 2x2, px^2
    depth: float  # camera-space z, meters


@dataclass
class ProjectionState:
    """Everything the backward pass needs, per Gaussian."""

    valid: np.ndarray  # (N,) bool
    t_cam: np.ndarray  # (N,3)
    mean2d: np.ndarray  # (N,2)
    cov2d: np.ndarray  # (N,2,2)
    depth: np.ndarray  # (N,)
    J: np.ndarray  # (N,2,3)
    M: np.ndarray  # (N,2,3)  J @ R
    Q: np.ndarray  # (N,3,3)  rotation of each Gaussian
    s: np.ndarray  # (N,3)    exp(log-scale)
    P: np.ndarray  # (N,3,3)  Q diag(s)
    Sigma: np.ndarray  # (N,3,3)


def project_batch(arrays: GaussianArrays, cam: Camera, near: float = 0.01) -> ProjectionState:
    """Project every Gaussian; rows behind the near plane are flagged invalid."""
    R = cam.pose.R
    tr = cam.pose.t
    mu = arrays.mu
    n = len(arrays)
    t = mu @ R.T + tr
    valid = t[:, 2] > near
    z = np.where(valid, t[:, 2], 1.0)

    fx, fy = cam.fx, cam.fy
    mean2d = np.empty((n, 2))
    mean2d[:, 0] = fx * t[:, 0] / z + cam.cx
    mean2d[:, 1] = fy * t[:, 1] / z + cam.cy

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * t[:, 0] / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * t[:, 1] / (z * z)

    Q = quat_to_matrix_batch(arrays.quat)
    s = np.exp(arrays.scale)
    P = Q * s[:, None, :]
    Sigma = np.einsum("nij,nkj->nik", P, P)

    M = np.einsum("nij,jk->nik", J, R)
    cov2d = np.einsum("nij,njk,nlk->nil", M, Sigma, M)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    return ProjectionState(
        valid=valid,
        t_cam=t,
        mean2d=mean2d,
        cov2d=cov2d,
        depth=t[:, 2].copy(),
        J=J,
        M=M,
        Q=Q,
        s=s,
        P=P,
        Sigma=Sigma,
    )


def project(g: FeatureGaussian, cam: Camera, near: float = 0.01):
    """Single-Gaussian projection; returns CULLED behind the near plane."""
    st = project_batch(GaussianArrays.from_list([g]), cam, near)
    if not st.valid[0]:
        return CULLED
    return ProjectedGaussian(st.mean2d[0].copy(), st.cov2d[0].copy(), float(st.depth[0]))


def _quat_matrix_backward(q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Adjoint of quat_to_matrix_batch with normalization folded in.

    q: (N,4) stored quaternions (any norm); G: (N,3,3) gradients w.r.t. the
    rotation matrices. Returns gradients w.r.t. the raw quaternions.
    """
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qh = q / norm
    w, x, y, z = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]

    dql = np.empty_like(qh)
    dql[:, 0] = 2.0 * (
        z * (G[:, 1, 0] - G[:, 0, 1])
        + y * (G[:, 0, 2] - G[:, 2, 0])
        + x * (G[:, 2, 1] - G[:, 1, 2])
    )
    dql[:, 1] = 2.0 * (
        y * (G[:, 0, 1] + G[:, 1, 0])
        + z * (G[:, 0, 2] + G[:, 2, 0])
        - 2.0 * x * (G[:, 1, 1] + G[:, 2, 2])
        + w * (G[:, 2, 1] - G[:, 1, 2])
    )
    dql[:, 2] = 2.0 * (
        x * (G[:, 0, 1] + G[:, 1, 0])
        + z * (G[:, 1, 2] + G[:, 2, 1])
        - 2.0 * y * (G[:, 0, 0] + G[:, 2, 2])
        + w * (G[:, 0, 2] - G[:, 2, 0])
    )
    dql[:, 3] = 2.0 * (
        x * (G[:, 0, 2] + G[:, 2, 0])
        + y * (G[:, 1, 2] + G[:, 2, 1])
        - 2.0 * z * (G[:, 0, 0] + G[:, 1, 1])
        + w * (G[:, 1, 0] - G[:, 0, 1])
    )
    # through the normalization: d/dq of q/|q| is (I - qh qh^T)/|q|
    proj = dql - qh * np.sum(dql * qh, axis=1, keepdims=True)
    return proj / norm


def _vee(S: np.ndarray) -> np.ndarray:
    return np.array(
        [S[2, 1] - S[1, 2], S[0, 2] - S[2, 0], S[1, 0] - S[0, 1]]
    )


def project_backward(
    st: ProjectionState,
    arrays: GaussianArrays,
    cam: Camera,
    d_mean2d: np.ndarray,
    d_cov2d: np.ndarray,
    d_depth: np.ndarray,
):
    """Chain screen-space gradients back to Gaussian parameters and the pose.

    d_cov2d must be the symmetric-matrix gradient (dL = <d_cov2d, dSigma2d>).
    Invalid rows must carry zero adjoints. Returns
    (d_mu, d_log_scale, d_quat, d_pose6) with d_pose6 = (nu, omega).
    """
    R = cam.pose.R
    fx, fy = cam.fx, cam.fy
    t = st.t_cam
    z = np.where(st.valid, t[:, 2], 1.0)

    Gc = 0.5 * (d_cov2d + np.transpose(d_cov2d, (0, 2, 1)))

    # cov2d = M Sigma M^T (+ const)
    dM = 2.0 * np.einsum("nij,njk,nkl->nil", Gc, st.M, st.Sigma)
    Gs = np.einsum("nji,njk,nkl->nil", st.M, Gc, st.M)  # M^T Gc M

    dJ = np.einsum("nij,kj->nik", dM, R)  # dM @ R^T
    GR_M = np.einsum("nji,njk->nik", st.J, dM)  # J^T dM, gradient on the explicit R in M

    # mean2d path: d(mean2d)/dt == J
    d_t = np.einsum("nji,nj->ni", st.J, d_mean2d)

    # J-entry dependence on t
    inv_z2 = 1.0 / (z * z)
    inv_z3 = inv_z2 / z
    d_t[:, 0] += dJ[:, 0, 2] * (-fx * inv_z2)
    d_t[:, 1] += dJ[:, 1, 2] * (-fy * inv_z2)
    d_t[:, 2] += (
        dJ[:, 0, 0] * (-fx * inv_z2)
        + dJ[:, 0, 2] * (2.0 * fx * t[:, 0] * inv_z3)
        + dJ[:, 1, 1] * (-fy * inv_z2)
        + dJ[:, 1, 2] * (2.0 * fy * t[:, 1] * inv_z3)
    )
    d_t[:, 2] += d_depth
    d_t[~st.valid] = 0.0

    d_mu = d_t @ R

    # Sigma = P P^T, P = Q diag(s)
    dP = 2.0 * np.einsum("nij,njk->nik", Gs, st.P)
    dQ = dP * st.s[:, None, :]
    d_log_scale = np.einsum("nab,nab->nb", dP, st.Q) * st.s
    d_log_scale[~st.valid] = 0.0
    dQ[~st.valid] = 0.0
    d_quat = _quat_matrix_backward(arrays.quat, dQ)

    # pose tangent
    d_nu = d_t.sum(axis=0)
    d_omega = np.cross(t[st.valid], d_t[st.valid]).sum(axis=0) if st.valid.any() else np.zeros(3)
    GR_M[~st.valid] = 0.0
    S = GR_M.sum(axis=0) @ R.T
    d_omega = d_omega + _vee(S)
    d_pose = np.concatenate([d_nu, d_omega])

    return d_mu, d_log_scale, d_quat, d_pose
