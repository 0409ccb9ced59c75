"""Synthetic-scene generation: the acceptance-test oracle.

Builds a ground-truth Gaussian store (class-colored clusters around the
origin), renders an orbit of frames through the production rasterizer and
writes a complete SceneStream plus a gt/ directory with the generating
store, per-cluster boxes and a reference voxelization. Everything is a
pure function of the spec, so fixed seeds give byte-identical output.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import List

import numpy as np

from ..core import Camera, GaussianArrays, RigidTransform, logit
from ..decoders import SemanticBBox, gaussian_to_voxel
from ..rasterizer import render
from ..rasterizer.kernels import DEPTH_SENTINEL
from ..semantics import SemanticCache, ingest_labels
from . import formats

CLASS_COLORS = np.array(
    [
        [0.85, 0.20, 0.15],
        [0.20, 0.70, 0.25],
        [0.20, 0.35, 0.85],
        [0.90, 0.75, 0.15],
        [0.70, 0.20, 0.75],
        [0.15, 0.75, 0.75],
    ]
)

PHYS_MATERIALS = ["wood", "fabric", "metal", "plastic", "ceramic", "stone"]


@dataclass
class SynthSpec:
    n_gaussians: int = 200
    n_classes: int = 4
    instances_per_class: int = 1
    n_frames: int = 60
    width: int = 64
    height: int = 64
    orbit_radius: float = 3.0
    orbit_height: float = 2.4
    orbit_degrees: float = 360.0
    cluster_radius: float = 0.35
    opacity: float = 0.97
    noise_pointmap: float = 0.0
    seed: int = 0
    layout_radius: float = 1.0
    # when set, the last class is a floor of flattened Gaussians under the
    # objects, so most pixels carry color/depth/feature supervision
    # (indoor-like scenes); object clusters use the remaining classes
    backdrop: bool = True
    backdrop_radius_factor: float = 0.62  # floor radius / orbit radius
    backdrop_budget: float = 0.3


@dataclass
class SynthScene:
    spec: SynthSpec
    arrays: GaussianArrays
    cameras: List[Camera]
    cluster_of: np.ndarray  # per-Gaussian instance id
    boxes: List[SemanticBBox]
    cache: SemanticCache
    diameter: float


def _positional(points: np.ndarray) -> np.ndarray:
    from ..semantics import GEO_GAIN

    n = np.linalg.norm(points, axis=-1, keepdims=True)
    return GEO_GAIN * points / (1.0 + n)


def sphere_store(
    n: int,
    radius: float,
    seed: int = 0,
    opacity: float = 0.99,
    sigma_factor: float = 0.8,
    inset_sigmas: float = 0.8,
    feat_dim: int = 4,
    cls: int = 0,
) -> GaussianArrays:
    """Dense Gaussian sphere whose rendered surface sits at `radius`.

    Splat mass extends roughly one sigma outward, so centers are inset by
    inset_sigmas * sigma to land the apparent surface on the nominal
    sphere.
    """
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    spacing = math.sqrt(4.0 * math.pi * radius**2 / n)
    sigma = sigma_factor * spacing
    rc = radius - inset_sigmas * sigma
    feat = np.zeros((n, feat_dim))
    feat[:, cls] = 1.0
    return GaussianArrays(
        mu=dirs * rc,
        scale=np.log(np.full((n, 3), sigma)),
        quat=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logit=np.full(n, float(logit(opacity))),
        color=np.tile([0.7, 0.3, 0.2], (n, 1)),
        feat=feat,
        sem_id=np.full(n, cls, dtype=np.int64),
    )


def orbit_cameras(
    n: int,
    radius: float = 2.2,
    elevation: float = 1.4,
    size: int = 96,
    focal: float = 82.5,
    target=(0.0, 0.0, 0.0),
) -> List[Camera]:
    """Cameras on an undulating orbit looking at a fixed target."""
    cams = []
    for k in range(n):
        a = 2.0 * math.pi * k / n
        pos = np.array(
            [radius * math.cos(a), radius * math.sin(a), elevation * math.sin(3 * a)]
        )
        cams.append(
            Camera(
                fx=focal,
                fy=focal,
                cx=size / 2.0,
                cy=size / 2.0,
                width=size,
                height=size,
                pose=look_at_pose(pos, np.asarray(target, dtype=float)),
            )
        )
    return cams


def look_at_pose(position: np.ndarray, target: np.ndarray) -> RigidTransform:
    """World->camera pose for a camera at `position` looking at `target`
    (pinhole convention: x right, y down, z forward; world z is up)."""
    f = target - position
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 0.0, 1.0])
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:
        r = np.array([1.0, 0.0, 0.0])
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    return RigidTransform(R, -R @ position)


def build_scene(spec: SynthSpec) -> SynthScene:
    rng = np.random.default_rng(spec.seed)
    q = spec.n_classes
    inst = spec.instances_per_class
    obj_classes = q - 1 if (spec.backdrop and q > 1) else q
    n_backdrop = (
        max(int(spec.n_gaussians * spec.backdrop_budget), 16)
        if spec.backdrop and q > 1
        else 0
    )
    n_objects = spec.n_gaussians - n_backdrop
    n_clusters = obj_classes * inst
    per = n_objects // n_clusters
    counts = [per] * n_clusters
    for i in range(n_objects - per * n_clusters):
        counts[i] += 1

    d_sem = q
    light = np.array([0.5, -0.3, 0.8])
    light = light / np.linalg.norm(light)
    mus, scales, quats, colors, feats, sems, cluster_of = [], [], [], [], [], [], []

    def add_shell(center, axes, k, cls, cluster_id, sigma_factor, color_base, inward):
        dirs = rng.standard_normal((k, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = 1.0 + rng.normal(0.0, 0.04, (k, 1))
        pts = center + dirs * radii * axes
        spacing = math.sqrt(4.0 * math.pi * float(np.mean(axes)) ** 2 / max(k, 1))
        sigma = sigma_factor * spacing
        mus.append(pts)
        scales.append(np.log(rng.lognormal(math.log(sigma), 0.15, (k, 3))))
        qs = rng.standard_normal((k, 4))
        quats.append(qs / np.linalg.norm(qs, axis=1, keepdims=True))
        normal = -dirs if inward else dirs
        shade = 0.7 + 0.3 * np.clip(normal @ light, 0.0, 1.0)[:, None]
        # per-splat texture makes surfaces photometrically distinctive
        texture = rng.normal(0, 0.10, (k, 3))
        colors.append(np.clip(color_base * shade + texture, 0.05, 0.95))
        onehot = np.zeros((k, d_sem))
        onehot[:, cls] = 1.0
        f = np.concatenate([onehot, _positional(pts)], axis=1)
        feats.append(f / np.linalg.norm(f, axis=1, keepdims=True))
        sems.append(np.full(k, cls, dtype=np.int64))
        cluster_of.append(np.full(k, cluster_id, dtype=np.int64))

    for c in range(n_clusters):
        cls = c % obj_classes
        angle = 2.0 * math.pi * c / n_clusters
        center = np.array(
            [
                spec.layout_radius * math.cos(angle),
                spec.layout_radius * math.sin(angle),
                0.6 + 0.25 * math.sin(2.0 * angle),
            ]
        )
        # overlapping shell of Gaussians: renders as one solid, smoothly
        # shaded blob with a crisp surface (sigma well below shell radius)
        axes = np.array([1.0, 1.0, 0.75]) * spec.cluster_radius
        base = CLASS_COLORS[cls % len(CLASS_COLORS)]
        add_shell(center, axes, counts[c], cls, c, 0.7, base, inward=False)

    if n_backdrop:
        # floor: flattened splats tiling a disk under the objects
        floor_r = spec.orbit_radius * spec.backdrop_radius_factor
        k = n_backdrop
        rr = floor_r * np.sqrt(rng.uniform(0.0, 1.0, k))
        th = rng.uniform(0.0, 2.0 * math.pi, k)
        pts = np.stack([rr * np.cos(th), rr * np.sin(th), rng.normal(0.0, 0.01, k)], axis=1)
        spacing = math.sqrt(math.pi * floor_r**2 / k)
        sig_xy = 0.8 * spacing
        scale = np.log(
            np.stack(
                [
                    rng.lognormal(math.log(sig_xy), 0.12, k),
                    rng.lognormal(math.log(sig_xy), 0.12, k),
                    np.full(k, 0.02),
                ],
                axis=1,
            )
        )
        mus.append(pts)
        scales.append(scale)
        quats.append(np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (k, 1)))
        base = np.array([0.52, 0.48, 0.44])
        radial = 0.85 + 0.15 * (1.0 - rr / floor_r)[:, None]
        colors.append(np.clip(base * radial + rng.normal(0, 0.07, (k, 3)), 0.05, 0.95))
        onehot = np.zeros((k, d_sem))
        onehot[:, q - 1] = 1.0
        f = np.concatenate([onehot, _positional(pts)], axis=1)
        feats.append(f / np.linalg.norm(f, axis=1, keepdims=True))
        sems.append(np.full(k, q - 1, dtype=np.int64))
        cluster_of.append(np.full(k, n_clusters, dtype=np.int64))

    arrays = GaussianArrays(
        mu=np.concatenate(mus),
        scale=np.concatenate(scales),
        quat=np.concatenate(quats),
        opacity_logit=np.full(spec.n_gaussians, float(logit(spec.opacity))),
        color=np.concatenate(colors),
        feat=np.concatenate(feats),
        sem_id=np.concatenate(sems),
    )
    cluster_of = np.concatenate(cluster_of)

    # exact per-cluster boxes (mu +/- 2 exp(scale) spans, the decoder convention)
    boxes = []
    ext = 2.0 * np.exp(arrays.scale)
    for c in range(n_clusters):
        members = np.nonzero(cluster_of == c)[0]
        lo = (arrays.mu[members] - ext[members]).min(axis=0)
        hi = (arrays.mu[members] + ext[members]).max(axis=0)
        boxes.append(
            SemanticBBox(
                entry_id=c % obj_classes,
                center=0.5 * (lo + hi),
                extents=hi - lo,
                gaussian_count=int(members.size),
            )
        )

    fov_focal = 0.5 * spec.width / math.tan(math.radians(30.0))
    cameras = []
    for t in range(spec.n_frames):
        ang = math.radians(spec.orbit_degrees) * t / spec.n_frames
        pos = np.array(
            [
                spec.orbit_radius * math.cos(ang),
                spec.orbit_radius * math.sin(ang),
                spec.orbit_height,
            ]
        )
        pose = look_at_pose(pos, np.array([0.0, 0.0, 0.2]))
        cameras.append(
            Camera(
                fx=fov_focal,
                fy=fov_focal,
                cx=spec.width / 2.0,
                cy=spec.height / 2.0,
                width=spec.width,
                height=spec.height,
                pose=pose,
            )
        )

    cache = SemanticCache(0.6)
    eye = np.eye(d_sem)
    ingest_labels(
        cache,
        [
            (
                f"object_{k}",
                eye[k],
                {"material": PHYS_MATERIALS[k % len(PHYS_MATERIALS)], "rigidity": 0.25 * (k + 1)},
            )
            for k in range(q)
        ],
        frame_index=0,
    )
    lo, hi = arrays.mu.min(axis=0), arrays.mu.max(axis=0)
    diameter = float(np.linalg.norm(hi - lo))
    return SynthScene(spec, arrays, cameras, cluster_of, boxes, cache, diameter)


def render_frame_data(scene: SynthScene, t: int):
    """Render ground-truth rgb / one-hot features / geometry for frame t."""
    spec = scene.spec
    cam = scene.cameras[t]
    out = render(scene.arrays, cam)
    h, w = spec.height, spec.width
    q = spec.n_classes

    covered = out.alpha >= 0.5
    fmap = np.zeros((h, w, q))
    cls = np.argmax(out.feature[..., :q], axis=-1)
    ys, xs = np.nonzero(covered)
    fmap[ys, xs, cls[ys, xs]] = 1.0

    depth_valid = out.depth != DEPTH_SENTINEL
    zs = np.where(depth_valid, out.depth, np.nan)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    xcam = (jj + 0.5 - cam.cx) / cam.fx * zs
    ycam = (ii + 0.5 - cam.cy) / cam.fy * zs
    pointmap = np.stack([xcam, ycam, zs], axis=-1)
    confidence = np.clip(out.alpha, 0.0, 1.0)
    confidence[~depth_valid] = 0.0
    return out.rgb, fmap, pointmap, confidence


def generate(spec: SynthSpec, out_dir: str) -> SynthScene:
    """Write the SceneStream plus gt/ artifacts; returns the scene."""
    scene = build_scene(spec)
    rng = np.random.default_rng(spec.seed + 1)

    for sub in ("frames", "features", "pointmaps", "gt"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    formats.write_intrinsics(os.path.join(out_dir, "intrinsics.txt"), scene.cameras[0])
    formats.write_poses(
        os.path.join(out_dir, "poses.txt"), [c.pose for c in scene.cameras]
    )
    labels = {
        0: [
            (e.label, e.embed, e.phys)
            for e in scene.cache.entries
        ]
    }
    formats.write_labels(os.path.join(out_dir, "labels.json"), labels)

    for t in range(spec.n_frames):
        rgb, fmap, pointmap, confidence = render_frame_data(scene, t)
        if spec.noise_pointmap > 0:
            noise = rng.normal(0.0, spec.noise_pointmap * scene.diameter, pointmap.shape)
            pointmap = pointmap + noise
        z = pointmap[..., 2]
        with np.errstate(invalid="ignore", divide="ignore"):
            inv_depth = np.where(np.isfinite(z) & (z > 0), 1.0 / z, 0.0)
        formats.write_png(os.path.join(out_dir, "frames", f"{t:05d}.png"), rgb)
        formats.write_fmap(os.path.join(out_dir, "features", f"{t:05d}.fmap"), fmap)
        formats.write_pmap(
            os.path.join(out_dir, "pointmaps", f"{t:05d}.pmap"),
            np.nan_to_num(pointmap, nan=0.0),
            np.where(np.isfinite(z), confidence, 0.0),
            inv_depth,
        )

    gt_dir = os.path.join(out_dir, "gt")
    formats.write_gaussians_ply(os.path.join(gt_dir, "gaussians.ply"), scene.arrays)
    formats.write_bboxes_json(os.path.join(gt_dir, "boxes.json"), scene.boxes, scene.cache)
    formats.write_cache_json(os.path.join(gt_dir, "cache.json"), scene.cache)
    voxel = scene.diameter / 64.0
    grid = gaussian_to_voxel(scene.arrays, voxel, scene.cache)
    formats.write_occ(os.path.join(gt_dir, "occupancy.occ"), grid)
    with open(os.path.join(gt_dir, "scene.json"), "w") as f:
        json.dump(
            {
                "diameter": scene.diameter,
                "n_classes": spec.n_classes,
                "instances_per_class": spec.instances_per_class,
                "seed": spec.seed,
                "noise_pointmap": spec.noise_pointmap,
            },
            f,
            indent=1,
            sort_keys=True,
        )
    return scene
