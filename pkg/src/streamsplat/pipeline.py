"""Online Gaussian lifecycle and the per-frame joint optimizer.

Each incoming frame runs two phases: a motion phase that moves co-visible
regions (one shared rigid motion each) and the camera pose, then, after
new Gaussians are spawned in newly observed areas, a refinement phase over
all Gaussian parameters, features and the pose. Low-opacity and stale
primitives are pruned and high-gradient ones split once per frame.

Gaussian parameters are updated with Adam-style per-group steps at
constant learning rates (the mean rate scales with the scene diameter);
the transient motion/pose parameters use plain gradient steps so a
converged static scene stays put. Future frames are never read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    MIN_LOG_SCALE,
    Camera,
    EngineConfig,
    FrameObservation,
    GaussianArrays,
    RigidTransform,
    logit,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    rotvec_to_matrix,
    rotvec_to_quat,
    sigmoid,
)
from .errors import DivergedOptimization, EmptyInit
from .losses import FrameTargets, total_loss
from .odometry import KeypointGraph, back_project
from .rasterizer import render
from . import semantics

PEAK_CONTRIB_EPS = 1e-3


@dataclass
class RegionMotion:
    """One shared rigid motion for a co-visible region."""

    translation: np.ndarray
    quat: np.ndarray

    @staticmethod
    def identity() -> "RegionMotion":
        return RegionMotion(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))


class AdamGroups:
    """Per-group Adam state that follows the store through add/prune/split."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def step(self, name: str, grad: np.ndarray, lr: float) -> np.ndarray:
        if name not in self.m:
            self.m[name] = np.zeros_like(grad)
            self.v[name] = np.zeros_like(grad)
            self.t[name] = 0
        m, v = self.m[name], self.v[name]
        self.t[name] += 1
        t = self.t[name]
        m += (1.0 - self.beta1) * (grad - m)
        v += (1.0 - self.beta2) * (grad * grad - v)
        mhat = m / (1.0 - self.beta1**t)
        vhat = v / (1.0 - self.beta2**t)
        return lr * mhat / (np.sqrt(vhat) + self.eps)

    def keep(self, mask: np.ndarray) -> None:
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k][mask]

    def append(self, count: int) -> None:
        for d in (self.m, self.v):
            for k in d:
                pad = np.zeros((count,) + d[k].shape[1:])
                d[k] = np.concatenate([d[k], pad])


class GaussianStore:
    """Growable array of feature Gaussians plus per-primitive statistics."""

    def __init__(self, arrays: GaussianArrays, scene_diameter: float):
        n = len(arrays)
        self.arrays = arrays
        self.scene_diameter = float(scene_diameter)
        self.region_id = np.full(n, -1, dtype=np.int64)
        self.grad_accum = np.zeros(n)
        self.grad_steps = 0
        self.peak_frame = np.zeros(n)
        self.stale_count = np.zeros(n, dtype=np.int64)
        self.age = np.zeros(n, dtype=np.int64)  # frames since creation
        self.adam = AdamGroups()
        self.audit: List[Tuple[int, str, int]] = []
        self.replay_cursor = 0

    def __len__(self):
        return len(self.arrays)

    def keep(self, mask: np.ndarray) -> None:
        self.arrays = self.arrays.subset(mask)
        self.region_id = self.region_id[mask]
        self.grad_accum = self.grad_accum[mask]
        self.peak_frame = self.peak_frame[mask]
        self.stale_count = self.stale_count[mask]
        self.age = self.age[mask]
        self.adam.keep(mask)

    def append(self, new: GaussianArrays) -> None:
        n = len(new)
        self.arrays = self.arrays.concat(new)
        self.region_id = np.concatenate([self.region_id, np.full(n, -1, dtype=np.int64)])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n)])
        self.peak_frame = np.concatenate([self.peak_frame, np.zeros(n)])
        self.stale_count = np.concatenate([self.stale_count, np.zeros(n, dtype=np.int64)])
        self.age = np.concatenate([self.age, np.zeros(n, dtype=np.int64)])
        self.adam.append(n)

    def reset_frame_stats(self) -> None:
        self.grad_accum[:] = 0.0
        self.grad_steps = 0
        self.peak_frame[:] = 0.0


# ---------------------------------------------------------------------------
# point-cloud seeding
# ---------------------------------------------------------------------------


def voxel_downsample(points, colors, feats, voxel: float):
    """One averaged sample per occupied voxel; deterministic ordering."""
    keys = np.floor(points / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    k = counts.shape[0]
    pts = np.zeros((k, 3))
    np.add.at(pts, inv, points)
    pts /= counts[:, None]
    cols = np.zeros((k, 3))
    np.add.at(cols, inv, colors)
    cols /= counts[:, None]
    fts = None
    if feats is not None:
        fts = np.zeros((k, feats.shape[1]))
        np.add.at(fts, inv, feats)
        fts /= counts[:, None]
    return pts, cols, fts


def _knn_scales(points: np.ndarray, k: int, fallback: float) -> np.ndarray:
    n = points.shape[0]
    if n <= 1:
        return np.full(n, fallback)
    kq = min(k + 1, n)
    dist, _ = cKDTree(points).query(points, k=kq)
    mean_nn = dist[:, 1:].mean(axis=1)
    mean_nn[~np.isfinite(mean_nn) | (mean_nn <= 0)] = fallback
    return mean_nn


def gaussians_from_cloud(
    points: np.ndarray,
    colors: np.ndarray,
    feats: Optional[np.ndarray],
    feat_dim: int,
    cfg: EngineConfig,
) -> GaussianArrays:
    n = points.shape[0]
    s = _knn_scales(points, cfg.init_knn, cfg.init_voxel_size)
    scale = np.log(np.clip(s, 1e-5, None))[:, None].repeat(3, axis=1)
    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    if feats is None:
        feats = np.zeros((n, feat_dim))
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = np.divide(feats, norms, out=feats.copy(), where=norms > 0)
    return GaussianArrays(
        mu=points,
        scale=scale,
        quat=quat,
        opacity_logit=np.full(n, float(logit(cfg.init_opacity))),
        color=np.clip(colors, 0.0, 1.0),
        feat=feats,
    )


def initialize(
    frame0: FrameObservation,
    frame1: FrameObservation,
    odom: KeypointGraph,
    cfg: EngineConfig,
    integrated0: Optional[np.ndarray] = None,
    integrated1: Optional[np.ndarray] = None,
) -> GaussianStore:
    """Seed the store from the back-projections of the first two frames."""
    clouds = []
    for frame, integ in ((frame0, integrated0), (frame1, integrated1)):
        node = odom.node(frame.index)
        clouds.append(
            back_project(frame, node.pose, odom.cam, cfg.min_backproject_conf, integ)
        )
    points = np.concatenate([c.points for c in clouds])
    if points.shape[0] == 0:
        raise EmptyInit("no confident points to back-project in the first two frames")
    colors = np.concatenate([c.colors for c in clouds])
    feats = None
    if all(c.feats is not None for c in clouds):
        feats = np.concatenate([c.feats for c in clouds])
    pts, cols, fts = voxel_downsample(points, colors, feats, cfg.init_voxel_size)
    feat_dim = fts.shape[1] if fts is not None else cfg.feature_dim
    arrays = gaussians_from_cloud(pts, cols, fts, feat_dim, cfg)
    lo, hi = points.min(axis=0), points.max(axis=0)
    diameter = max(float(np.linalg.norm(hi - lo)), 1e-3)
    store = GaussianStore(arrays, diameter)
    store.audit.append((frame1.index, "init", len(arrays)))
    return store


# ---------------------------------------------------------------------------
# lifecycle ops
# ---------------------------------------------------------------------------


def add_new(
    store: GaussianStore,
    frame: FrameObservation,
    odom: KeypointGraph,
    cfg: EngineConfig,
    integrated: Optional[np.ndarray] = None,
    alpha_image: Optional[np.ndarray] = None,
) -> GaussianStore:
    """Spawn Gaussians from back-projected points in newly observed areas
    (pixels whose rendered alpha is below the threshold)."""
    node = odom.node(frame.index)
    if alpha_image is None:
        cam = odom.cam.with_pose(node.pose)
        out = render(store.arrays, cam, channels=("alpha",), near=cfg.near_plane,
                     tile_size=cfg.tile_size)
        alpha_image = out.alpha
    cloud = back_project(frame, node.pose, odom.cam, cfg.min_backproject_conf, integrated)
    if cloud.points.shape[0] == 0:
        return store
    new_mask = alpha_image[cloud.pixels[:, 0], cloud.pixels[:, 1]] < cfg.new_area_alpha
    if not new_mask.any():
        return store
    pts, cols, fts = voxel_downsample(
        cloud.points[new_mask],
        cloud.colors[new_mask],
        None if cloud.feats is None else cloud.feats[new_mask],
        cfg.init_voxel_size,
    )
    if len(store.arrays):
        # same duplicate suppression as initialize(), but against the store
        d, _ = cKDTree(store.arrays.mu).query(pts, k=1)
        fresh = d > cfg.init_voxel_size
        if not fresh.any():
            return store
        pts, cols = pts[fresh], cols[fresh]
        fts = fts[fresh] if fts is not None else None
    feat_dim = store.arrays.feat_dim if len(store.arrays) else (
        fts.shape[1] if fts is not None else cfg.feature_dim
    )
    new_arrays = gaussians_from_cloud(pts, cols, fts, feat_dim, cfg)
    store.append(new_arrays)
    store.audit.append((frame.index, "add", len(new_arrays)))
    return store


def prune(store: GaussianStore, zeta: float, stale_horizon: int, frame_index: int = -1) -> GaussianStore:
    """Drop low-opacity Gaussians and ones that stopped contributing."""
    alpha = sigmoid(store.arrays.opacity_logit)
    drop = (alpha < zeta) | (store.stale_count >= stale_horizon)
    if drop.any():
        store.keep(~drop)
        store.audit.append((frame_index, "prune", -int(drop.sum())))
    return store


def split_one_step(
    store: GaussianStore, grad_threshold: float, frame_index: int = -1
) -> GaussianStore:
    """Replace each high-gradient Gaussian with two children along its
    principal axis; first moment is conserved by the symmetric offsets."""
    if store.grad_steps == 0 or len(store) == 0:
        return store
    mean_grad = store.grad_accum / store.grad_steps
    to_split = mean_grad > grad_threshold
    if not to_split.any():
        return store
    idx = np.nonzero(to_split)[0]
    a = store.arrays
    kids = []
    for i in idx:
        R = quat_to_matrix(a.quat[i])
        ax = int(np.argmax(a.scale[i]))
        off = 0.5 * math.exp(a.scale[i, ax]) * R[:, ax]
        for sgn in (1.0, -1.0):
            kids.append(
                (
                    a.mu[i] + sgn * off,
                    a.scale[i] - math.log(1.6),
                    a.quat[i],
                    a.opacity_logit[i],
                    a.color[i],
                    a.feat[i],
                    a.sem_id[i],
                )
            )
    children = GaussianArrays(
        mu=np.stack([k[0] for k in kids]),
        scale=np.stack([k[1] for k in kids]),
        quat=np.stack([k[2] for k in kids]),
        opacity_logit=np.array([k[3] for k in kids]),
        color=np.stack([k[4] for k in kids]),
        feat=np.stack([k[5] for k in kids]),
        sem_id=np.array([k[6] for k in kids], dtype=np.int64),
    )
    store.keep(~to_split)
    store.append(children)
    store.audit.append((frame_index, "split", int(len(idx))))
    return store


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, i: int) -> int:
        p = self.parent
        while p[i] != i:
            p[i] = p[p[i]]
            i = p[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def assign_regions(store: GaussianStore, prev_cache) -> np.ndarray:
    """Co-visible regions: connected components of screen-footprint overlap
    in the previous frame (two rects that intersect share a tile), merged
    across Gaussians that carry the same semantic id."""
    n = len(store)
    region = np.full(n, -1, dtype=np.int64)
    if n == 0 or prev_cache is None:
        store.region_id = region
        return region
    uf = _UnionFind(n)
    offsets, items = prev_cache.offsets, prev_cache.items
    visible = np.zeros(n, dtype=bool)
    for t in range(offsets.shape[0] - 1):
        lo, hi = offsets[t], offsets[t + 1]
        if hi - lo == 0:
            continue
        first = items[lo]
        if first >= n:
            continue
        visible[items[lo:hi]] = True
        for k in range(lo + 1, hi):
            uf.union(first, items[k])
    for q in np.unique(store.arrays.sem_id):
        if q < 0:
            continue
        members = np.nonzero((store.arrays.sem_id == q) & visible)[0]
        for m in members[1:]:
            uf.union(members[0], m)
    roots = {}
    for i in range(n):
        if not visible[i]:
            continue
        r = uf.find(i)
        if r not in roots:
            roots[r] = len(roots)
        region[i] = roots[r]
    store.region_id = region
    return region


def transition_covisible(
    store: GaussianStore, motions: Dict[int, RegionMotion]
) -> GaussianStore:
    """Rigidly transform each region by its shared motion (about the
    region centroid; a pure translation shifts member means exactly)."""
    a = store.arrays
    for rid, motion in motions.items():
        members = np.nonzero(store.region_id == rid)[0]
        if members.size == 0:
            continue
        R = quat_to_matrix(motion.quat)
        c = a.mu[members].mean(axis=0)
        a.mu[members] = (a.mu[members] - c) @ R.T + c + motion.translation
        a.quat[members] = quat_normalize(
            quat_multiply(quat_normalize(motion.quat)[None, :], a.quat[members])
        )
    return store


# ---------------------------------------------------------------------------
# per-frame optimization
# ---------------------------------------------------------------------------


def _apply_motions(arrays, region_id, region_ids, rot, trans, centroids):
    eff = arrays.copy()
    for k, rid in enumerate(region_ids):
        members = np.nonzero(region_id == rid)[0]
        if members.size == 0:
            continue
        R = rot[k]
        eff.mu[members] = (arrays.mu[members] - centroids[k]) @ R.T + centroids[k] + trans[k]
        q = rotvec_quat_cache(R)
        eff.quat[members] = quat_normalize(quat_multiply(q[None, :], arrays.quat[members]))
    return eff


def rotvec_quat_cache(R: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation matrix (w,x,y,z)."""
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        return quat_normalize(
            np.array(
                [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
            )
        )
    i = int(np.argmax(np.diag(R)))
    if i == 0:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 1:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def _pure_quat_grad(q_eff: np.ndarray, d_quat: np.ndarray) -> np.ndarray:
    """d loss / d omega of a left quaternion perturbation (1, omega/2)."""
    out = np.zeros(3)
    for k in range(3):
        e = np.zeros(4)
        e[k + 1] = 1.0
        dq = 0.5 * quat_multiply(e[None, :], q_eff)
        out[k] = float((dq * d_quat).sum())
    return out


def _frame_targets(frame: FrameObservation, integrated: Optional[np.ndarray]) -> FrameTargets:
    depth = None
    valid = None
    if frame.inv_depth is not None:
        valid = frame.inv_depth > 0
        depth = np.where(valid, 1.0 / np.where(valid, frame.inv_depth, 1.0), 0.0)
    elif frame.pointmap is not None:
        valid = np.all(np.isfinite(frame.pointmap), axis=-1)
        depth = np.where(valid, np.nan_to_num(frame.pointmap[..., 2]), 0.0)
        valid = valid & (depth > 0)
    return FrameTargets(rgb=frame.rgb, depth=depth, depth_valid=valid, feature=integrated)


def optimize_frame(
    store: GaussianStore,
    frame: FrameObservation,
    odom: KeypointGraph,
    cfg: EngineConfig,
    cache: Optional[semantics.SemanticCache] = None,
    integrated: Optional[np.ndarray] = None,
    optimize_pose: bool = False,
    history: Optional[List[Tuple[int, FrameTargets]]] = None,
):
    """Run the two optimization phases plus lifecycle updates on one frame.

    `history` carries (frame_index, targets) of frames already streamed;
    the refinement phase interleaves them with the current frame (the
    joint loss covers every frame seen so far, sampled round-robin).
    Returns (store, refined_pose, metrics_dict). Raises
    DivergedOptimization (carrying the phase-start snapshot) on NaN loss.
    """
    node = odom.node(frame.index)
    pose = node.pose
    if integrated is None and cache is not None:
        integrated = semantics.integrate_feature_map(frame, cache)
    targets = _frame_targets(frame, integrated)
    d_sem = max(store.arrays.feat_dim - 3, 0)
    embeds = cache.embed_matrix(d_sem) if cache is not None and len(cache) else None
    diam = store.scene_diameter
    metrics: Dict[str, float] = {}
    if history is None:
        history = []
    if cfg.replay_window > 0:
        history = history[-cfg.replay_window :]

    def guard(breakdown, snapshot):
        if not math.isfinite(breakdown.total):
            raise DivergedOptimization("loss is not finite", last_stable=snapshot)

    # phase 1: region motions + pose
    pose_adam = AdamGroups()
    region_ids = [int(r) for r in np.unique(store.region_id) if r >= 0]
    if region_ids or optimize_pose:
        snapshot = store.arrays.copy()
        nr = len(region_ids)
        rot = [np.eye(3) for _ in range(nr)]
        trans = np.zeros((nr, 3))
        centroids = np.stack(
            [store.arrays.mu[store.region_id == rid].mean(axis=0) for rid in region_ids]
        ) if nr else np.zeros((0, 3))
        member_idx = [np.nonzero(store.region_id == rid)[0] for rid in region_ids]
        for _ in range(cfg.motion_steps):
            eff = _apply_motions(store.arrays, store.region_id, region_ids, rot, trans, centroids)
            cam = odom.cam.with_pose(pose)
            bd, grads, pose_grad, out = total_loss(
                targets, eff, cam, cfg, class_embeds=embeds, tile_size=cfg.tile_size
            )
            guard(bd, snapshot)
            np.maximum(store.peak_frame, out.per_gaussian_peak_weight, out=store.peak_frame)
            for k in range(nr):
                mem = member_idx[k]
                # per-member normalization: a static region whose members'
                # gradients cancel stays put; only coherent motion engages
                d_t = grads.mu[mem].mean(axis=0)
                arm = eff.mu[mem] - centroids[k] - trans[k]
                d_w = np.cross(arm, grads.mu[mem]).mean(axis=0)
                d_w += _pure_quat_grad(eff.quat[mem], grads.quat[mem]) / mem.size
                trans[k] -= cfg.lr_mean * diam * d_t
                rot[k] = rotvec_to_matrix(-cfg.lr_quat * d_w) @ rot[k]
            if optimize_pose:
                pose = pose.perturbed(-pose_adam.step("pose", pose_grad, cfg.lr_pose))
        if nr:
            store.arrays = _apply_motions(
                store.arrays, store.region_id, region_ids, rot, trans, centroids
            )
        metrics["motion_loss"] = bd.total

    # new observations
    cam = odom.cam.with_pose(pose)
    pre_alpha = render(
        store.arrays, cam, channels=("alpha",), near=cfg.near_plane, tile_size=cfg.tile_size
    ).alpha
    node.pose = pose
    add_new(store, frame, odom, cfg, integrated=integrated, alpha_image=pre_alpha)

    # phase 2: all Gaussian parameters + features + pose; steps interleave
    # the current frame with replayed history frames
    snapshot = store.arrays.copy()
    a = store.adam
    bd = None
    frac = cfg.replay_fraction if history else 0.0
    for i in range(cfg.refine_steps):
        replay = frac > 0 and math.floor((i + 1) * frac) > math.floor(i * frac)
        if replay:
            h_idx, h_targets = history[store.replay_cursor % len(history)]
            store.replay_cursor += 1
            cam = odom.cam.with_pose(odom.node(h_idx).pose)
            step_targets = h_targets
        else:
            cam = odom.cam.with_pose(pose)
            step_targets = targets
        step_bd, grads, pose_grad, out = total_loss(
            step_targets, store.arrays, cam, cfg, class_embeds=embeds, tile_size=cfg.tile_size
        )
        guard(step_bd, snapshot)
        if not replay:
            bd = step_bd
        np.maximum(store.peak_frame, out.per_gaussian_peak_weight, out=store.peak_frame)
        store.grad_accum += np.linalg.norm(grads.mean2d, axis=1)
        store.grad_steps += 1
        arr = store.arrays
        arr.mu -= a.step("mu", grads.mu, cfg.lr_mean * diam)
        arr.scale -= a.step("scale", grads.scale, cfg.lr_scale)
        np.clip(arr.scale, MIN_LOG_SCALE, math.log(diam), out=arr.scale)
        arr.quat -= a.step("quat", grads.quat, cfg.lr_quat)
        arr.quat /= np.linalg.norm(arr.quat, axis=1, keepdims=True)
        arr.opacity_logit -= a.step("opacity_logit", grads.opacity_logit, cfg.lr_opacity)
        arr.color -= a.step("color", grads.color, cfg.lr_color)
        np.clip(arr.color, 0.0, 1.0, out=arr.color)
        arr.feat -= a.step("feat", grads.feat, cfg.lr_feat)
        norms = np.linalg.norm(arr.feat, axis=1, keepdims=True)
        np.divide(arr.feat, norms, out=arr.feat, where=norms > 0)
        if optimize_pose and not replay:
            pose = pose.perturbed(-pose_adam.step("pose", pose_grad, cfg.lr_pose))
    if bd is not None:
        metrics["refine_loss"] = bd.total
        metrics.update(
            l1=bd.l1_photo,
            l_depth=bd.l_depth,
            l_knowledge=bd.l_knowledge,
            l_scale_reg=bd.l_scale_reg,
        )

    # lifecycle: prune then split, using this frame's statistics
    stale = store.peak_frame < PEAK_CONTRIB_EPS
    store.stale_count = np.where(stale, store.stale_count + 1, 0)
    prune(store, cfg.zeta_prune, cfg.stale_horizon, frame.index)
    split_one_step(store, cfg.split_grad_threshold, frame.index)
    store.age += 1
    store.reset_frame_stats()

    if cache is not None and len(cache):
        store.arrays.sem_id = semantics.assign_sem_ids(store.arrays, cache)

    node.pose = pose
    metrics["n_gaussians"] = float(len(store))
    return store, pose, metrics


# ---------------------------------------------------------------------------
# streaming engine
# ---------------------------------------------------------------------------


class StreamingEngine:
    """Single-writer streaming loop: odometry -> semantics -> optimization.

    Outputs after frame t depend only on frames <= t and the config.
    """

    def __init__(self, cam: Camera, cfg: EngineConfig, estimate_poses: bool = False):
        self.cfg = cfg
        self.base_cam = cam
        self.graph = KeypointGraph(cam, cfg.window_size)
        self.cache = semantics.SemanticCache(cfg.theta_cache)
        self.store: Optional[GaussianStore] = None
        self.estimate_poses = estimate_poses
        self._pending: Optional[Tuple[FrameObservation, np.ndarray]] = None
        self._prev_integrated: Optional[np.ndarray] = None
        self._prev_pose: Optional[RigidTransform] = None
        self._prev_render_cache = None
        self._history: List[Tuple[int, FrameTargets]] = []

    def ingest_labels(self, labels, frame_index: int) -> Dict[str, int]:
        _, id_map = semantics.ingest_labels(self.cache, labels, frame_index)
        return id_map

    def process_frame(self, frame: FrameObservation) -> Dict[str, float]:
        cfg = self.cfg
        if self.estimate_poses:
            frame = FrameObservation(
                index=frame.index,
                rgb=frame.rgb,
                feature_map=frame.feature_map,
                pointmap=frame.pointmap,
                confidence=frame.confidence,
                inv_depth=frame.inv_depth,
                pose_prior=frame.pose_prior if not self.graph.nodes else None,
            )
        self.graph, pose = ingest_frame_dispatch(self.graph, frame, cfg)
        if self.estimate_poses and len(self.graph.nodes) >= 2:
            self.graph, _, _ = local_bundle_adjust_dispatch(self.graph, cfg)
            pose = self.graph.nodes[-1].pose

        integrated = semantics.integrate_feature_map(frame, self.cache)
        info: Dict[str, float] = {"frame": float(frame.index)}

        if self.store is None:
            if self._pending is None:
                self._pending = (frame, integrated)
                self._remember(frame, integrated, pose)
                info["n_gaussians"] = 0.0
                return info
            f0, integ0 = self._pending
            self.store = initialize(f0, frame, self.graph, cfg, integ0, integrated)
            if len(self.cache):
                self.store.arrays.sem_id = semantics.assign_sem_ids(self.store.arrays, self.cache)
            self._history.append((f0.index, _frame_targets(f0, integ0)))
            self._pending = None
        else:
            if self._prev_integrated is not None and self._prev_integrated.shape == integrated.shape:
                m = semantics.matching_distribution(
                    self._prev_integrated, integrated, cfg.match_tau, cfg.match_radius
                )
                cam_prev = self.base_cam.with_pose(self._prev_pose)
                cam_now = self.base_cam.with_pose(pose)
                self.store.arrays = semantics.forward_warp(
                    self.store.arrays, m, cam_prev, cam_now, cfg.warp_beta, cfg.near_plane
                )
            assign_regions(self.store, self._prev_render_cache)

        self.store, pose, metrics = optimize_frame(
            self.store,
            frame,
            self.graph,
            cfg,
            cache=self.cache,
            integrated=integrated,
            optimize_pose=self.estimate_poses,
            history=self._history,
        )
        info.update(metrics)
        self._history.append((frame.index, _frame_targets(frame, integrated)))
        self._remember(frame, integrated, pose)
        return info

    def _remember(self, frame, integrated, pose):
        self._prev_integrated = integrated
        self._prev_pose = pose
        if self.store is not None and len(self.store):
            cam = self.base_cam.with_pose(pose)
            out = render(
                self.store.arrays,
                cam,
                channels=("alpha",),
                near=self.cfg.near_plane,
                tile_size=self.cfg.tile_size,
            )
            self._prev_render_cache = out.cache
        else:
            self._prev_render_cache = None


def ingest_frame_dispatch(graph: KeypointGraph, frame: FrameObservation, cfg: EngineConfig):
    from .odometry import ingest_frame

    return ingest_frame(graph, frame, cfg.rho_odo, cfg.keypoint_stride)


def local_bundle_adjust_dispatch(graph: KeypointGraph, cfg: EngineConfig):
    from .odometry import local_bundle_adjust

    return local_bundle_adjust(graph, cfg.window_size, cfg.lm_max_iters, cfg.huber_px)
