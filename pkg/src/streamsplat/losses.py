"""Objective terms of the joint optimization and their composition.

total = lambda1 * L1_photo + lambda2 * L_depth + lambda3 * L_knowledge + L_scale_reg

Pixel losses are means over their valid supports so the weights are
resolution-independent. The scale regularizer sums per-Gaussian deviations
within each semantic class, weighted by the class's rendered semantic
response in the current frame; its gradient flows both directly into the
log-scales and, through the response weights, into the rendered feature
image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Camera, EngineConfig, GaussianArrays, as_arrays
from .errors import DimMismatch
from .rasterizer import RenderAdjoints, render, render_backward
from .rasterizer.kernels import DEPTH_SENTINEL

EPS = 1e-12


@dataclass
class LossBreakdown:
    l1_photo: float
    l_depth: float
    l_knowledge: float
    l_scale_reg: float
    total: float


@dataclass
class FrameTargets:
    """Per-frame supervision: image, metric depth (+validity), integrated features."""

    rgb: np.ndarray  # H,W,3
    depth: Optional[np.ndarray]  # H,W metric depth
    depth_valid: Optional[np.ndarray]  # H,W bool
    feature: Optional[np.ndarray]  # H,W,D integrated knowledge map


def photometric_l1(rendered: np.ndarray, target: np.ndarray) -> float:
    if rendered.shape != target.shape:
        raise DimMismatch(f"photometric shapes {rendered.shape} vs {target.shape}")
    return float(np.abs(rendered - target).mean())


def depth_l1(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Mean |D_hat - D| over the mask; returns (value, n_valid).

    The mask must already exclude target-invalid pixels; rendered sentinel
    pixels are excluded here. n_valid == 0 flags an empty mask.
    """
    if rendered.shape != target.shape or mask.shape != rendered.shape:
        raise DimMismatch("depth shapes disagree")
    m = mask & (rendered != DEPTH_SENTINEL)
    n = int(m.sum())
    if n == 0:
        return 0.0, 0
    return float(np.abs(rendered[m] - target[m]).mean()), n


def knowledge_l2(rendered: np.ndarray, target: np.ndarray) -> float:
    """Mean squared feature distance over pixels whose target is nonzero."""
    if rendered.shape != target.shape:
        raise DimMismatch(f"feature shapes {rendered.shape} vs {target.shape}")
    mask = np.any(target != 0.0, axis=-1)
    n = int(mask.sum())
    if n == 0:
        return 0.0
    diff = rendered[mask] - target[mask]
    return float((diff * diff).sum() / n)


def _class_deviations(arrays: GaussianArrays, n_classes: int):
    """Per-class |delta_i - mean| sums; delta is the mean exponentiated scale."""
    delta = np.exp(arrays.scale).mean(axis=1)
    sums = np.zeros(n_classes)
    signs = np.zeros(len(arrays))
    centered = np.zeros(len(arrays))
    for q in range(n_classes):
        members = np.nonzero(arrays.sem_id == q)[0]
        if members.size == 0:
            continue
        d = delta[members]
        dev = d - d.mean()
        sums[q] = np.abs(dev).sum()
        centered[members] = dev
        signs[members] = np.sign(dev)
    return delta, sums, signs


def class_response_weights(
    feature_map: np.ndarray, class_embeds: np.ndarray
) -> np.ndarray:
    """Mean positive response of each class embedding in a feature map."""
    d_sem = class_embeds.shape[1]
    resp = feature_map[..., :d_sem] @ class_embeds.T  # H,W,Q
    return np.maximum(resp, 0.0).mean(axis=(0, 1))


def scale_regularizer(
    gaussians,
    class_embeds: Optional[np.ndarray] = None,
    feature_map: Optional[np.ndarray] = None,
) -> float:
    """sum_q w_q * sum_{i in q} |delta_i - mean_q delta|.

    w_q is the class's mean semantic response in the frame's feature map
    when one is supplied, else 1. Gaussians without a class are excluded.
    """
    arrays = as_arrays(gaussians)
    if len(arrays) == 0 or arrays.sem_id.max(initial=-1) < 0:
        return 0.0
    n_classes = int(arrays.sem_id.max()) + 1
    _, sums, _ = _class_deviations(arrays, n_classes)
    if feature_map is not None and class_embeds is not None:
        w = class_response_weights(feature_map, class_embeds[:n_classes])
    else:
        w = np.ones(n_classes)
    return float((w * sums).sum())


def total_loss(
    targets: FrameTargets,
    gaussians,
    cam: Camera,
    cfg: EngineConfig,
    class_embeds: Optional[np.ndarray] = None,
    tile_size: int = 16,
    compute_grads: bool = True,
):
    """Joint loss (and its exact gradients) for one frame.

    Returns (LossBreakdown, GaussianGrads | None, pose_grad | None, RenderOutput).
    """
    arrays = as_arrays(gaussians)
    channels = ("rgb", "depth", "alpha") + (("feature",) if targets.feature is not None else ())
    out = render(arrays, cam, channels=channels, near=cfg.near_plane, tile_size=tile_size)
    h, w = cam.height, cam.width

    # photometric
    resid_rgb = out.rgb - targets.rgb
    l1 = float(np.abs(resid_rgb).mean())
    a_rgb = cfg.lambda1 * np.sign(resid_rgb) / resid_rgb.size

    # depth
    a_depth = None
    ld = 0.0
    if targets.depth is not None:
        valid = (
            targets.depth_valid
            if targets.depth_valid is not None
            else np.ones((h, w), dtype=bool)
        )
        mask = valid & (out.depth != DEPTH_SENTINEL)
        n = int(mask.sum())
        if n > 0:
            dd = out.depth - targets.depth
            ld = float(np.abs(dd[mask]).mean())
            a_depth = np.where(mask, cfg.lambda2 * np.sign(dd) / n, 0.0)

    # knowledge
    a_feat = None
    lkw = 0.0
    if targets.feature is not None:
        fmask = np.any(targets.feature != 0.0, axis=-1)
        nf = int(fmask.sum())
        a_feat = np.zeros_like(out.feature)
        if nf > 0:
            fd = out.feature - targets.feature
            lkw = float((fd[fmask] ** 2).sum() / nf)
            a_feat = cfg.lambda3 * 2.0 * fd * fmask[..., None] / nf

    # semantic-aware scale regularization; the per-class weights come from
    # the frame's own semantic map (input data), so no gradient can lower
    # the loss by suppressing rendered semantics
    lreg = 0.0
    reg_dscale = None
    n_classes = int(arrays.sem_id.max(initial=-1)) + 1
    if n_classes > 0 and class_embeds is not None and targets.feature is not None:
        embeds = class_embeds[:n_classes]
        delta, sums, signs = _class_deviations(arrays, n_classes)
        wq = class_response_weights(targets.feature, embeds)
        lreg = float((wq * sums).sum())
        if compute_grads:
            reg_dscale = np.zeros_like(arrays.scale)
            for q in range(n_classes):
                members = np.nonzero(arrays.sem_id == q)[0]
                if members.size == 0:
                    continue
                s = signs[members]
                ddelta = wq[q] * (s - s.mean())
                reg_dscale[members] = ddelta[:, None] * np.exp(arrays.scale[members]) / 3.0

    total = cfg.lambda1 * l1 + cfg.lambda2 * ld + cfg.lambda3 * lkw + lreg
    breakdown = LossBreakdown(l1, ld, lkw, lreg, float(total))

    if not compute_grads:
        return breakdown, None, None, out

    adj = RenderAdjoints(rgb=a_rgb, feature=a_feat, depth=a_depth, alpha=None)
    grads, pose_grad = render_backward(arrays, cam, adj, out)
    if reg_dscale is not None:
        grads.scale = grads.scale + reg_dscale
    return breakdown, grads, pose_grad, out
