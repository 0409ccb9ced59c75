"""Forward rendering and the exact compositing adjoint.

Per pixel, front-to-back: out = sum_i v_i ahat_i prod_{j<i} (1 - ahat_j)
with ahat_i = alpha_i exp(-0.5 d^T cov2d^{-1} d) at the pixel center,
Gaussians visited in ascending camera depth (ties by index), footprints
truncated at 3 sigma, and early termination once transmittance < 1e-4.

The depth channel is the alpha-weighted expected camera-space depth
(normalized by accumulated alpha); empty pixels carry the -1 sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..core import Camera, GaussianArrays, as_arrays, sigmoid
from ..errors import DimMismatch, StaleForwardState
from . import kernels
from .projection import ProjectionState, project_backward, project_batch

ALL_CHANNELS = ("rgb", "depth", "feature", "alpha")


@dataclass
class ForwardCache:
    """Everything render_backward needs, frozen at forward time."""

    fingerprint: tuple
    arrays: GaussianArrays
    cam: Camera
    st: ProjectionState
    conic: np.ndarray
    rect: np.ndarray
    order: np.ndarray
    offsets: np.ndarray
    items: np.ndarray
    ntx: int
    nty: int
    tile: int
    feat_used: np.ndarray
    channels: tuple
    alpha: np.ndarray  # per-Gaussian opacity after sigmoid


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    feature: np.ndarray
    alpha: np.ndarray
    per_gaussian_grad_norm: np.ndarray
    per_gaussian_peak_weight: np.ndarray
    cache: ForwardCache = field(repr=False, default=None)


@dataclass
class RenderAdjoints:
    """Per-channel adjoint images; None means zero."""

    rgb: Optional[np.ndarray] = None
    feature: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None


@dataclass
class GaussianGrads:
    mu: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    feat: np.ndarray
    mean2d: np.ndarray  # screen-space positional gradient (split statistic)

    def scaled(self, f: float) -> "GaussianGrads":
        return GaussianGrads(
            self.mu * f,
            self.scale * f,
            self.quat * f,
            self.opacity_logit * f,
            self.color * f,
            self.feat * f,
            self.mean2d * f,
        )


def _fingerprint(arrays: GaussianArrays, cam: Camera, near, tile, channels) -> tuple:
    return (
        len(arrays),
        arrays.feat_dim,
        float(near),
        int(tile),
        tuple(channels),
        float(arrays.mu.sum()),
        float(arrays.scale.sum()),
        float(arrays.quat.sum()),
        float(arrays.opacity_logit.sum()),
        float(arrays.color.sum()),
        float(arrays.feat.sum()),
        cam.fx,
        cam.fy,
        cam.cx,
        cam.cy,
        cam.width,
        cam.height,
        float(cam.pose.R.sum()),
        float(cam.pose.t.sum()),
    )


def _screen_rects(st: ProjectionState, width: int, height: int) -> np.ndarray:
    """Inclusive pixel-index AABBs of the 3-sigma footprints."""
    n = st.mean2d.shape[0]
    ext_x = 3.0 * np.sqrt(st.cov2d[:, 0, 0])
    ext_y = 3.0 * np.sqrt(st.cov2d[:, 1, 1])
    rect = np.empty((n, 4), dtype=np.int64)
    with np.errstate(invalid="ignore"):
        rect[:, 0] = np.maximum(np.ceil(st.mean2d[:, 0] - ext_x - 0.5), 0)
        rect[:, 1] = np.minimum(np.floor(st.mean2d[:, 0] + ext_x - 0.5), width - 1)
        rect[:, 2] = np.maximum(np.ceil(st.mean2d[:, 1] - ext_y - 0.5), 0)
        rect[:, 3] = np.minimum(np.floor(st.mean2d[:, 1] + ext_y - 0.5), height - 1)
    rect[~st.valid] = np.array([1, 0, 1, 0], dtype=np.int64)
    return rect


def conic_of_cov2d(cov2d: np.ndarray) -> np.ndarray:
    """(N,2,2) covariances -> (N,3) inverse coefficients (a, b, c)."""
    A = cov2d[:, 0, 0]
    B = cov2d[:, 0, 1]
    C = cov2d[:, 1, 1]
    det = A * C - B * B
    return np.stack([C / det, -B / det, A / det], axis=1)


def render(
    gaussians,
    cam: Camera,
    channels: Sequence[str] = ALL_CHANNELS,
    near: float = 0.01,
    tile_size: int = 16,
) -> RenderOutput:
    arrays = as_arrays(gaussians)
    channels = tuple(channels)
    for ch in channels:
        if ch not in ALL_CHANNELS:
            raise ValueError(f"unknown channel {ch!r}")
    n = len(arrays)
    h, w = cam.height, cam.width

    st = project_batch(arrays, cam, near)
    conic = conic_of_cov2d(st.cov2d)
    rect = _screen_rects(st, w, h)
    cand = np.nonzero(st.valid)[0]
    order = cand[np.argsort(st.depth[cand], kind="stable")]
    offsets, items, ntx, nty = kernels.bin_tiles(order, rect, w, h, tile_size)

    feat_used = arrays.feat if "feature" in channels else np.zeros((n, 0))
    alpha = sigmoid(arrays.opacity_logit)

    out_rgb = np.zeros((h, w, 3))
    out_feat = np.zeros((h, w, feat_used.shape[1]))
    out_alpha = np.zeros((h, w))
    out_accz = np.zeros((h, w))
    out_depth = np.empty((h, w))
    peak_w = np.zeros(n)

    kernels.composite_forward(
        w,
        h,
        tile_size,
        ntx,
        nty,
        offsets,
        items,
        st.mean2d,
        conic,
        alpha,
        st.depth,
        arrays.color,
        feat_used,
        out_rgb,
        out_feat,
        out_alpha,
        out_accz,
        out_depth,
        peak_w,
    )

    cache = ForwardCache(
        fingerprint=_fingerprint(arrays, cam, near, tile_size, channels),
        arrays=arrays,
        cam=cam,
        st=st,
        conic=conic,
        rect=rect,
        order=order,
        offsets=offsets,
        items=items,
        ntx=ntx,
        nty=nty,
        tile=tile_size,
        feat_used=feat_used,
        channels=channels,
        alpha=alpha,
    )
    return RenderOutput(
        rgb=out_rgb,
        depth=out_depth,
        feature=out_feat,
        alpha=out_alpha,
        per_gaussian_grad_norm=np.zeros(n),
        per_gaussian_peak_weight=peak_w,
        cache=cache,
    )


def render_backward(
    gaussians,
    cam: Camera,
    adjoints: RenderAdjoints,
    output: RenderOutput,
):
    """Exact adjoint of render(); returns (GaussianGrads, pose_grad[6]).

    The forward cache inside `output` must have been produced by render()
    on these exact inputs; anything else raises StaleForwardState.
    """
    arrays = as_arrays(gaussians)
    cache = output.cache
    if cache is None:
        raise StaleForwardState("output carries no forward cache")
    fp = _fingerprint(arrays, cam, cache.fingerprint[2], cache.tile, cache.channels)
    if fp != cache.fingerprint:
        raise StaleForwardState("forward cache does not match the given inputs")

    n = len(arrays)
    h, w = cam.height, cam.width
    fdim = cache.feat_used.shape[1]

    a_rgb = adjoints.rgb if adjoints.rgb is not None else np.zeros((h, w, 3))
    a_feat = adjoints.feature if adjoints.feature is not None else np.zeros((h, w, fdim))
    a_alpha = adjoints.alpha if adjoints.alpha is not None else np.zeros((h, w))
    a_depth = adjoints.depth if adjoints.depth is not None else np.zeros((h, w))
    if a_rgb.shape != (h, w, 3) or a_alpha.shape != (h, w) or a_depth.shape != (h, w):
        raise DimMismatch("adjoint image shape mismatch")
    if a_feat.shape != (h, w, fdim):
        raise DimMismatch(
            f"feature adjoint {a_feat.shape} does not match rendered feature dim {fdim}"
        )

    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_alpha = np.zeros(n)
    d_depthval = np.zeros(n)
    d_color = np.zeros((n, 3))
    d_feat = np.zeros((n, fdim))

    kernels.composite_backward(
        w,
        h,
        cache.tile,
        cache.ntx,
        cache.nty,
        cache.offsets,
        cache.items,
        cache.st.mean2d,
        cache.conic,
        cache.alpha,
        cache.st.depth,
        arrays.color,
        cache.feat_used,
        np.ascontiguousarray(a_rgb),
        np.ascontiguousarray(a_feat),
        np.ascontiguousarray(a_alpha),
        np.ascontiguousarray(a_depth),
        d_mean2d,
        d_conic,
        d_alpha,
        d_depthval,
        d_color,
        d_feat,
    )

    # conic -> cov2d: dL/dSigma2d = -Lam G Lam with G the symmetric-matrix grad
    lam = np.empty((n, 2, 2))
    lam[:, 0, 0] = cache.conic[:, 0]
    lam[:, 0, 1] = cache.conic[:, 1]
    lam[:, 1, 0] = cache.conic[:, 1]
    lam[:, 1, 1] = cache.conic[:, 2]
    G = np.empty((n, 2, 2))
    G[:, 0, 0] = d_conic[:, 0]
    G[:, 0, 1] = 0.5 * d_conic[:, 1]
    G[:, 1, 0] = 0.5 * d_conic[:, 1]
    G[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -np.einsum("nij,njk,nkl->nil", lam, G, lam)

    d_mu, d_log_scale, d_quat, d_pose = project_backward(
        cache.st, arrays, cam, d_mean2d, d_cov2d, d_depthval
    )

    alpha = cache.alpha
    d_logit = d_alpha * alpha * (1.0 - alpha)
    if fdim == 0 and arrays.feat_dim != 0:
        d_feat = np.zeros((n, arrays.feat_dim))

    grads = GaussianGrads(
        mu=d_mu,
        scale=d_log_scale,
        quat=d_quat,
        opacity_logit=d_logit,
        color=d_color,
        feat=d_feat,
        mean2d=d_mean2d,
    )
    output.per_gaussian_grad_norm = np.linalg.norm(d_mean2d, axis=1)
    return grads, d_pose
