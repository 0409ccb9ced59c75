"""Streaming runner: drives odometry + pipeline over a SceneStream and
evaluates held-out views as the run progresses.

Every stream frame yields one metrics record. Held-out frames (index
t with t % holdout_every == holdout_every - 1) are never shown to the
engine; each record evaluates all held-out views seen so far against the
current model. metrics.jsonl is byte-identical across runs for a fixed
seed; wall-clock timings go to timings.jsonl so they cannot break that.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..core import Camera, EngineConfig, RigidTransform
from ..pipeline import StreamingEngine
from ..rasterizer import render
from ..semantics import SemanticCache
from . import formats
from .metrics import MetricsRecord, ate_rmse, confusion_matrix, psnr, ssim, umeyama_alignment

# a pixel votes for a class only when its rendered semantic response is
# substantial; weak responses (splat skirts over empty space) are background
SEMANTIC_RESPONSE_MIN = 0.5


def predicted_classes(feature_image: np.ndarray, alpha_image: np.ndarray, n_classes: int):
    """Class-argmax semantic render with a background decision."""
    resp = feature_image[..., :n_classes]
    best = np.argmax(resp, axis=-1)
    strength = np.take_along_axis(resp, best[..., None], axis=-1)[..., 0]
    live = (alpha_image >= 0.5) & (strength >= SEMANTIC_RESPONSE_MIN)
    return np.where(live, best, -1).astype(np.int64)


def is_holdout(t: int, every: int) -> bool:
    return every > 0 and t % every == every - 1


@dataclass
class EvalView:
    index: int
    rgb: np.ndarray
    gt_class: np.ndarray  # (H,W) int, -1 background
    gt_pose: Optional[RigidTransform]


def _gt_class_map(fmap: np.ndarray) -> np.ndarray:
    has = np.any(fmap != 0.0, axis=-1)
    cls = np.argmax(fmap, axis=-1)
    return np.where(has, cls, -1).astype(np.int64)


def _alignment(engine: StreamingEngine, stream: formats.SceneStream, processed: List[int]):
    """gt-world -> engine-world rigid alignment from trajectory centers."""
    if stream.poses is None:
        return None
    if not engine.estimate_poses:
        return RigidTransform.identity()
    if len(processed) < 3:
        return RigidTransform.identity()
    est = []
    gt = []
    for t in processed:
        try:
            node = engine.graph.node(t)
        except KeyError:
            continue
        est.append(node.pose.inverse().t)
        gt.append(stream.poses[t].inverse().t)
    if len(est) < 3:
        return RigidTransform.identity()
    R, tt = umeyama_alignment(np.stack(gt), np.stack(est))
    return RigidTransform(R, tt)


def evaluate_holdouts(
    engine: StreamingEngine,
    stream: formats.SceneStream,
    views: Sequence[EvalView],
    align: Optional[RigidTransform],
):
    """Pooled PSNR, mean SSIM and segmentation scores over held-out views."""
    if engine.store is None or len(engine.store) == 0 or not views or align is None:
        return None
    cam0 = stream.camera
    q = max(engine.store.arrays.feat_dim - 3, 0)
    mse_sum = 0.0
    ssim_sum = 0.0
    cm = None
    n_px = 0
    for view in views:
        if view.gt_pose is None:
            return None
        pose = view.gt_pose.compose(align.inverse())
        cam = cam0.with_pose(pose)
        out = render(engine.store.arrays, cam, near=engine.cfg.near_plane,
                     tile_size=engine.cfg.tile_size)
        rgb = np.clip(out.rgb, 0.0, 1.0)
        mse_sum += float(((rgb - view.rgb) ** 2).sum())
        n_px += view.rgb.size
        ssim_sum += ssim(rgb, view.rgb)
        if q:
            pred = predicted_classes(out.feature, out.alpha, q)
            c = confusion_matrix(pred, view.gt_class, q)
            cm = c if cm is None else cm + c
    mse = mse_sum / n_px
    pooled_psnr = float("inf") if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
    result = {
        "psnr": pooled_psnr,
        "ssim": ssim_sum / len(views),
    }
    if cm is not None:
        ious, accs = [], []
        for c in range(q):
            gt_c = cm[c].sum()
            if gt_c == 0:
                continue
            tp = cm[c, c]
            fp = cm[:, c].sum() - tp
            fn = gt_c - tp
            ious.append(tp / (tp + fp + fn) if tp + fp + fn else 0.0)
            accs.append(tp / gt_c)
        if ious:
            result["miou"] = float(np.mean(ious))
            result["macc"] = float(np.mean(accs))
    return result


def run_stream(
    scene_dir: str,
    out_dir: str,
    cfg: EngineConfig,
    poses_mode: str = "given",
    holdout_every: Optional[int] = None,
    decode: Sequence[str] = (),
    decode_voxel: Optional[float] = None,
    max_frames: Optional[int] = None,
) -> Dict:
    """Stream a scene through the engine; returns a run summary."""
    stream = formats.SceneStream.open(scene_dir)
    if poses_mode == "given" and stream.poses is None:
        raise formats.MalformedStream("poses.txt: missing (required for --poses=given)")
    holdout = cfg.holdout_every if holdout_every is None else holdout_every
    estimate = poses_mode == "estimate"
    engine = StreamingEngine(stream.camera, cfg, estimate_poses=estimate)

    os.makedirs(out_dir, exist_ok=True)
    records: List[MetricsRecord] = []
    timings: List[dict] = []
    held_views: List[EvalView] = []
    processed: List[int] = []
    n = stream.n_frames if max_frames is None else min(stream.n_frames, max_frames)

    for t in range(n):
        wall: Dict[str, float] = {}
        labels = stream.labels_for(t)
        if labels:
            engine.ingest_labels(labels, t)
        frame = stream.load_frame(t, with_pose=(not estimate or t == 0))
        info: Dict[str, float] = {}
        if is_holdout(t, holdout):
            held_views.append(
                EvalView(
                    index=t,
                    rgb=frame.rgb,
                    gt_class=_gt_class_map(frame.feature_map),
                    gt_pose=stream.poses[t] if stream.poses else None,
                )
            )
        else:
            t0 = time.perf_counter()
            info = engine.process_frame(frame)
            wall["optimize"] = (time.perf_counter() - t0) * 1e3
            processed.append(t)

        t0 = time.perf_counter()
        align = _alignment(engine, stream, processed)
        scores = evaluate_holdouts(engine, stream, held_views, align)
        wall["evaluate"] = (time.perf_counter() - t0) * 1e3

        rec = MetricsRecord(
            frame=t,
            trained=not is_holdout(t, holdout),
            n_gaussians=int(info.get("n_gaussians", len(engine.store) if engine.store else 0)),
            loss_total=info.get("refine_loss"),
            loss_l1=info.get("l1"),
            loss_depth=info.get("l_depth"),
            loss_knowledge=info.get("l_knowledge"),
            loss_scale_reg=info.get("l_scale_reg"),
            wall_ms=wall,
        )
        if scores is not None:
            rec.psnr = scores.get("psnr")
            rec.ssim = scores.get("ssim")
            rec.miou = scores.get("miou")
            rec.macc = scores.get("macc")
        if estimate and stream.poses is not None and len(processed) >= 3:
            est = np.stack([engine.graph.node(i).pose.inverse().t for i in processed])
            gt = np.stack([stream.poses[i].inverse().t for i in processed])
            rec.ate = ate_rmse(est, gt)
        records.append(rec)
        timings.append({"frame": t, "wall_ms": wall})

    # artifacts
    if engine.store is not None:
        formats.write_gaussians_ply(os.path.join(out_dir, "gaussians.ply"), engine.store.arrays)
    formats.write_cache_json(os.path.join(out_dir, "cache.json"), engine.cache)
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "timings.jsonl"), "w") as f:
        for row in timings:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    if decode and engine.store is not None and len(engine.store):
        from .. import decoders

        voxel = decode_voxel or engine.store.scene_diameter / 64.0
        if "occ" in decode:
            grid = decoders.gaussian_to_voxel(engine.store.arrays, voxel, engine.cache)
            formats.write_occ(os.path.join(out_dir, "occupancy.occ"), grid)
        if "bbox" in decode:
            boxes = decoders.extract_bboxes(engine.store.arrays, engine.cache)
            formats.write_bboxes_json(os.path.join(out_dir, "bboxes.json"), boxes, engine.cache)
        if "mesh" in decode:
            cams = [
                stream.camera.with_pose(engine.graph.node(i).pose) for i in processed
            ]
            mesh = decoders.extract_mesh(
                engine.store.arrays, cams, voxel, cache=engine.cache, near=cfg.near_plane
            )
            formats.write_mesh_obj(os.path.join(out_dir, "mesh.obj"), mesh)

    from .report import write_report

    write_report(out_dir, records)

    summary = {
        "frames": n,
        "trained_frames": len(processed),
        "held_out_frames": len(held_views),
        "final_gaussians": len(engine.store) if engine.store else 0,
        "final_psnr": records[-1].psnr if records else None,
        "final_ssim": records[-1].ssim if records else None,
        "final_miou": records[-1].miou if records else None,
        "final_ate": records[-1].ate if records else None,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(
            {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in summary.items()},
            f,
            indent=1,
            sort_keys=True,
        )
    summary["engine"] = engine
    summary["records"] = records
    return summary
