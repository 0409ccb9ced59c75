"""Metric computation: image fidelity, segmentation, boxes, occupancy, ATE.

PSNR is 10*log10(1/MSE) on [0,1] images (infinite for identical inputs,
serialized as the string "inf"). SSIM uses the standard 11x11 Gaussian
window (sigma 1.5, K1=0.01, K2=0.03). Segmentation metrics come from a
confusion matrix over class-argmax renders with -1 as background/ignore
pool; box AP is VOC-style at IoU 0.5 with gaussian_count as the score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ClassMismatch

PSNR_INF = float("inf")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    from skimage.metrics import structural_similarity

    return float(
        structural_similarity(
            a,
            b,
            channel_axis=2 if a.ndim == 3 else None,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            win_size=11,
            use_sample_covariance=False,
        )
    )


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    """(n_classes+1)^2 counts; index n_classes is the background bucket (-1)."""
    p = np.where(pred < 0, n_classes, pred).ravel()
    g = np.where(gt < 0, n_classes, gt).ravel()
    k = n_classes + 1
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def seg_scores(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> Tuple[float, float]:
    """(mIoU, mAcc) over foreground classes present in the ground truth."""
    cm = confusion_matrix(pred, gt, n_classes)
    ious, accs = [], []
    for q in range(n_classes):
        gt_q = cm[q].sum()
        if gt_q == 0:
            continue
        tp = cm[q, q]
        fp = cm[:, q].sum() - tp
        fn = gt_q - tp
        ious.append(tp / (tp + fp + fn) if tp + fp + fn else 0.0)
        accs.append(tp / gt_q)
    if not ious:
        return 0.0, 0.0
    return float(np.mean(ious)), float(np.mean(accs))


def box_iou(a, b) -> float:
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    if np.any(hi <= lo):
        return 0.0
    inter = float(np.prod(hi - lo))
    va = float(np.prod(a.hi - a.lo))
    vb = float(np.prod(b.hi - b.lo))
    return inter / (va + vb - inter)


def _voc_ap(tp: List[int], n_gt: int) -> float:
    """Continuous-interpolation AP from a score-ordered hit list."""
    if n_gt == 0:
        return 0.0
    tp_arr = np.array(tp, dtype=np.float64)
    if tp_arr.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp_arr)
    recall = cum_tp / n_gt
    precision = cum_tp / (np.arange(tp_arr.size) + 1.0)
    # envelope
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_r = 0.0
    for i in range(tp_arr.size):
        ap += (recall[i] - prev_r) * precision[i]
        prev_r = recall[i]
    return float(ap)


def bbox_ap(pred_boxes, gt_boxes, iou_thr: float = 0.5) -> Tuple[float, float]:
    """(AP, mAP): pooled and per-class VOC AP at the IoU threshold.

    Predictions are ranked by gaussian_count (the detector's confidence
    proxy); each ground-truth box matches at most one prediction.
    """
    classes = sorted({b.entry_id for b in gt_boxes})
    per_class = []
    pooled_tp: List[int] = []
    pooled_order = sorted(pred_boxes, key=lambda b: -b.gaussian_count)
    matched_global = set()
    for p in pooled_order:
        best, best_iou = None, iou_thr
        for gi, g in enumerate(gt_boxes):
            if gi in matched_global or g.entry_id != p.entry_id:
                continue
            iou = box_iou(p, g)
            if iou >= best_iou:
                best, best_iou = gi, iou
        if best is not None:
            matched_global.add(best)
            pooled_tp.append(1)
        else:
            pooled_tp.append(0)
    ap = _voc_ap(pooled_tp, len(gt_boxes))
    for q in classes:
        gts = [g for g in gt_boxes if g.entry_id == q]
        preds = [p for p in pooled_order if p.entry_id == q]
        matched = set()
        tp = []
        for p in preds:
            best, best_iou = None, iou_thr
            for gi, g in enumerate(gts):
                if gi in matched:
                    continue
                iou = box_iou(p, g)
                if iou >= best_iou:
                    best, best_iou = gi, iou
            if best is not None:
                matched.add(best)
                tp.append(1)
            else:
                tp.append(0)
        per_class.append(_voc_ap(tp, len(gts)))
    return ap, float(np.mean(per_class)) if per_class else 0.0


def occupancy_scores(pred_grid, gt_grid, threshold: float = 0.5) -> Tuple[float, float]:
    """(IoU, mIoU) of predicted vs ground-truth occupancy, compared on the
    ground-truth lattice (pred sampled at gt voxel centers)."""
    if pred_grid.semantics.shape[-1] != gt_grid.semantics.shape[-1]:
        raise ClassMismatch(
            f"{pred_grid.semantics.shape[-1]} vs {gt_grid.semantics.shape[-1]} classes"
        )
    centers = gt_grid.voxel_centers().reshape(-1, 3)
    vi = np.floor((centers - pred_grid.origin) / pred_grid.voxel_size).astype(np.int64)
    inside = np.all((vi >= 0) & (vi < pred_grid.dims), axis=1)
    pred_occ = np.zeros(centers.shape[0])
    pred_occ[inside] = pred_grid.occupancy[vi[inside, 0], vi[inside, 1], vi[inside, 2]]
    gt_occ = gt_grid.occupancy.reshape(-1)

    p = pred_occ > threshold
    g = gt_occ > threshold
    union = (p | g).sum()
    iou = float((p & g).sum() / union) if union else 1.0

    q = gt_grid.semantics.shape[-1]
    if q == 0:
        return iou, iou
    pred_cls = np.full(centers.shape[0], -1, dtype=np.int64)
    sem = np.zeros((centers.shape[0], q))
    sem[inside] = pred_grid.semantics[vi[inside, 0], vi[inside, 1], vi[inside, 2]]
    pred_cls[p] = np.argmax(sem[p], axis=-1)
    gt_cls = np.full(centers.shape[0], -1, dtype=np.int64)
    gt_cls[g] = np.argmax(gt_grid.semantics.reshape(-1, q)[g], axis=-1)
    ious = []
    for c in range(q):
        pc = pred_cls == c
        gc = gt_cls == c
        u = (pc | gc).sum()
        if gc.sum() == 0:
            continue
        ious.append((pc & gc).sum() / u if u else 0.0)
    miou = float(np.mean(ious)) if ious else iou
    return iou, miou


def umeyama_alignment(src: np.ndarray, dst: np.ndarray):
    """Rigid transform (no scale) minimizing ||dst - (R src + t)||."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def ate_rmse(est_positions: np.ndarray, gt_positions: np.ndarray) -> float:
    """RMS position error after rigid alignment of the trajectories."""
    if est_positions.shape[0] < 3:
        return 0.0
    R, t = umeyama_alignment(gt_positions, est_positions)
    aligned = gt_positions @ R.T + t
    return float(np.sqrt(((est_positions - aligned) ** 2).sum(axis=1).mean()))


@dataclass
class MetricsRecord:
    frame: int
    trained: bool
    n_gaussians: int
    loss_total: Optional[float] = None
    loss_l1: Optional[float] = None
    loss_depth: Optional[float] = None
    loss_knowledge: Optional[float] = None
    loss_scale_reg: Optional[float] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    miou: Optional[float] = None
    macc: Optional[float] = None
    occ_iou: Optional[float] = None
    occ_miou: Optional[float] = None
    bbox_ap: Optional[float] = None
    ate: Optional[float] = None
    wall_ms: Dict[str, float] = field(default_factory=dict)

    def to_json_dict(self, include_timings: bool = False) -> dict:
        doc = {}
        for k, v in self.__dict__.items():
            if k == "wall_ms":
                if include_timings:
                    doc[k] = v
                continue
            if isinstance(v, float) and math.isinf(v):
                v = "inf"
            doc[k] = v
        return doc
