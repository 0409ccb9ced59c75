"""Bit-exact on-disk formats and the SceneStream layout.

Binary containers (all little-endian):

FMAP  magic "EAFM", version u32=1, H W D u32, then H*W*D float32
      (row-major, channel-last). File size is exactly 20 + 4*H*W*D.
PMAP  magic "EAPM", same header, D == 5 fixed: per pixel
      (x, y, z, confidence, inverse_depth) in the frame's own coordinates.
OCC   magic "EAOC", version u32=1, nx ny nz u32, origin 3*f64, voxel f64,
      then nx*ny*nz occupancy float32 and nx*ny*nz class uint16
      (65535 = unoccupied), C order.
PLY   binary_little_endian Gaussians with double-precision properties
      x y z scale_0..2 rot_0..3 opacity r g b f_0..f_{D-1} and int sem_id;
      logs/logits are stored raw so reading back is bit-exact.

Text formats: poses.txt has one line of 12 floats per frame (row-major
3x4 world->camera, shortest round-trip decimal repr); intrinsics.txt is
"fx fy cx cy width height"; labels.json maps frame index to label seeds.

A SceneStream directory holds frames/%05d.png, features/%05d.fmap,
optional pointmaps/%05d.pmap, optional poses.txt, intrinsics.txt and
labels.json.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..core import Camera, FrameObservation, GaussianArrays, RigidTransform
from ..errors import MalformedStream

FMAP_MAGIC = b"EAFM"
PMAP_MAGIC = b"EAPM"
OCC_MAGIC = b"EAOC"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# FMAP / PMAP
# ---------------------------------------------------------------------------


def _write_block(path: str, magic: bytes, arr: np.ndarray) -> None:
    h, w, d = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<IIII", FORMAT_VERSION, h, w, d))
        f.write(payload.tobytes())


def _read_block(path: str, magic: bytes) -> np.ndarray:
    name = os.path.basename(path)
    try:
        with open(path, "rb") as f:
            head = f.read(20)
            if len(head) < 20 or head[:4] != magic:
                raise MalformedStream(f"{name}: bad magic or truncated header")
            version, h, w, d = struct.unpack("<IIII", head[4:20])
            if version != FORMAT_VERSION:
                raise MalformedStream(f"{name}: unsupported version {version}")
            data = f.read()
    except OSError as e:
        raise MalformedStream(f"{name}: {e}") from e
    expected = 4 * h * w * d
    if len(data) != expected:
        raise MalformedStream(
            f"{name}: payload is {len(data)} bytes, expected {expected} (H={h} W={w} D={d})"
        )
    return np.frombuffer(data, dtype="<f4").reshape(h, w, d).astype(np.float64)


def write_fmap(path: str, feature_map: np.ndarray) -> None:
    _write_block(path, FMAP_MAGIC, feature_map)


def read_fmap(path: str) -> np.ndarray:
    return _read_block(path, FMAP_MAGIC)


def validate_fmap(path: str) -> Tuple[int, int, int]:
    """Check magic, version and the exact size formula; returns (H, W, D)."""
    arr = read_fmap(path)
    h, w, d = arr.shape
    if os.path.getsize(path) != 20 + 4 * h * w * d:
        raise MalformedStream(f"{os.path.basename(path)}: size formula violated")
    return h, w, d


def write_pmap(
    path: str, pointmap: np.ndarray, confidence: np.ndarray, inv_depth: np.ndarray
) -> None:
    h, w = confidence.shape
    block = np.concatenate(
        [pointmap, confidence[..., None], inv_depth[..., None]], axis=-1
    ).reshape(h, w, 5)
    _write_block(path, PMAP_MAGIC, block)


def read_pmap(path: str):
    block = _read_block(path, PMAP_MAGIC)
    if block.shape[2] != 5:
        raise MalformedStream(f"{os.path.basename(path)}: PMAP must have 5 channels")
    return block[..., 0:3], block[..., 3], block[..., 4]


# ---------------------------------------------------------------------------
# Gaussian PLY
# ---------------------------------------------------------------------------


def write_gaussians_ply(path: str, arrays: GaussianArrays) -> None:
    n = len(arrays)
    d = arrays.feat_dim
    props = (
        ["x", "y", "z"]
        + [f"scale_{i}" for i in range(3)]
        + [f"rot_{i}" for i in range(4)]
        + ["opacity", "r", "g", "b"]
        + [f"f_{i}" for i in range(d)]
    )
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property double {p}" for p in props]
    header += ["property int sem_id", "end_header"]
    body = np.concatenate(
        [
            arrays.mu,
            arrays.scale,
            arrays.quat,
            arrays.opacity_logit[:, None],
            arrays.color,
            arrays.feat,
        ],
        axis=1,
    ).astype("<f8")
    sem = arrays.sem_id.astype("<i4")
    row_size = body.shape[1] * 8 + 4
    buf = bytearray()
    for i in range(n):
        buf += body[i].tobytes()
        buf += sem[i].tobytes()
    assert len(buf) == n * row_size
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(bytes(buf))


def read_gaussians_ply(path: str) -> GaussianArrays:
    name = os.path.basename(path)
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise MalformedStream(f"{name}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    n = None
    props: List[Tuple[str, str]] = []
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append((parts[1], parts[2]))
    if n is None:
        raise MalformedStream(f"{name}: missing vertex element")
    names = [p[1] for p in props]
    fdim = sum(1 for nm in names if nm.startswith("f_"))
    dtype = np.dtype(
        [(nm, "<f8") if ty == "double" else (nm, "<i4") for ty, nm in props]
    )
    body = raw[end + len(b"end_header\n") :]
    if len(body) != n * dtype.itemsize:
        raise MalformedStream(f"{name}: body is {len(body)} bytes, expected {n * dtype.itemsize}")
    rec = np.frombuffer(body, dtype=dtype, count=n)
    get = lambda *fields: np.stack([rec[f] for f in fields], axis=1) if n else np.zeros((0, len(fields)))
    return GaussianArrays(
        mu=get("x", "y", "z"),
        scale=get(*[f"scale_{i}" for i in range(3)]),
        quat=get(*[f"rot_{i}" for i in range(4)]),
        opacity_logit=rec["opacity"].astype(np.float64) if n else np.zeros(0),
        color=get("r", "g", "b"),
        feat=get(*[f"f_{i}" for i in range(fdim)]) if fdim else np.zeros((n, 0)),
        sem_id=rec["sem_id"].astype(np.int64) if n else np.zeros(0, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# occupancy container
# ---------------------------------------------------------------------------


def write_occ(path: str, grid) -> None:
    nx, ny, nz = (int(v) for v in grid.dims)
    classes = np.full((nx, ny, nz), 65535, dtype="<u2")
    occupied = grid.occupancy > 0
    if grid.semantics.shape[-1]:
        cls = np.argmax(grid.semantics, axis=-1).astype("<u2")
        classes[occupied] = cls[occupied]
    with open(path, "wb") as f:
        f.write(OCC_MAGIC)
        f.write(struct.pack("<IIII", FORMAT_VERSION, nx, ny, nz))
        f.write(np.asarray(grid.origin, dtype="<f8").tobytes())
        f.write(struct.pack("<d", float(grid.voxel_size)))
        f.write(np.ascontiguousarray(grid.occupancy, dtype="<f4").tobytes())
        f.write(classes.tobytes())


def read_occ(path: str):
    name = os.path.basename(path)
    with open(path, "rb") as f:
        head = f.read(20)
        if len(head) < 20 or head[:4] != OCC_MAGIC:
            raise MalformedStream(f"{name}: bad magic")
        version, nx, ny, nz = struct.unpack("<IIII", head[4:20])
        if version != FORMAT_VERSION:
            raise MalformedStream(f"{name}: unsupported version {version}")
        origin = np.frombuffer(f.read(24), dtype="<f8").copy()
        (voxel,) = struct.unpack("<d", f.read(8))
        count = nx * ny * nz
        occ = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(nx, ny, nz).copy()
        cls = np.frombuffer(f.read(2 * count), dtype="<u2").reshape(nx, ny, nz).copy()
    return origin, voxel, (nx, ny, nz), occ, cls


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------


def write_poses(path: str, poses: List[RigidTransform]) -> None:
    with open(path, "w") as f:
        for p in poses:
            m = np.hstack([p.R, p.t[:, None]]).reshape(-1)
            f.write(" ".join(repr(float(v)) for v in m) + "\n")


def read_poses(path: str) -> List[RigidTransform]:
    poses = []
    with open(path) as f:
        for ln, line in enumerate(f):
            vals = [float(v) for v in line.split()]
            if len(vals) != 12:
                raise MalformedStream(
                    f"{os.path.basename(path)}: line {ln + 1} has {len(vals)} values, expected 12"
                )
            m = np.array(vals).reshape(3, 4)
            poses.append(RigidTransform(m[:, :3].copy(), m[:, 3].copy()))
    return poses


def write_intrinsics(path: str, cam: Camera) -> None:
    with open(path, "w") as f:
        vals = [cam.fx, cam.fy, cam.cx, cam.cy]
        f.write(" ".join(repr(float(v)) for v in vals) + f" {cam.width} {cam.height}\n")


def read_intrinsics(path: str) -> Camera:
    name = os.path.basename(path)
    try:
        with open(path) as f:
            vals = f.read().split()
    except OSError as e:
        raise MalformedStream(f"{name}: {e}") from e
    if len(vals) != 6:
        raise MalformedStream(f"{name}: expected 6 values, got {len(vals)}")
    fx, fy, cx, cy = (float(v) for v in vals[:4])
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=int(vals[4]), height=int(vals[5]))


def write_labels(path: str, per_frame: Dict[int, list]) -> None:
    """per_frame: frame index -> [(label, embedding, phys), ...]."""
    doc = {
        str(t): [
            {"label": lbl, "embedding": [float(v) for v in emb], "phys": phys}
            for lbl, emb, phys in items
        ]
        for t, items in per_frame.items()
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def read_labels(path: str) -> Dict[int, list]:
    name = os.path.basename(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise MalformedStream(f"{name}: {e}") from e
    out: Dict[int, list] = {}
    for key, items in doc.items():
        out[int(key)] = [
            (it["label"], np.asarray(it["embedding"], dtype=np.float64), it.get("phys", {}))
            for it in items
        ]
    return out


def write_cache_json(path: str, cache) -> None:
    doc = {
        "merge_threshold": cache.merge_threshold,
        "entries": [
            {
                "label": e.label,
                "embedding": [float(v) for v in e.embed],
                "phys": e.phys,
                "hits": e.hits,
                "first_seen": e.first_seen,
            }
            for e in cache.entries
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def read_cache_json(path: str):
    from ..semantics import CacheEntry, SemanticCache

    with open(path) as f:
        doc = json.load(f)
    cache = SemanticCache(doc["merge_threshold"])
    for e in doc["entries"]:
        cache.entries.append(
            CacheEntry(
                label=e["label"],
                embed=np.asarray(e["embedding"], dtype=np.float64),
                phys=e.get("phys", {}),
                hits=int(e["hits"]),
                first_seen=int(e["first_seen"]),
            )
        )
    return cache


def write_bboxes_json(path: str, boxes, cache=None) -> None:
    doc = []
    for b in boxes:
        label = None
        if cache is not None and 0 <= b.entry_id < len(cache.entries):
            label = cache.entries[b.entry_id].label
        doc.append(
            {
                "entry_id": int(b.entry_id),
                "label": label,
                "center": [float(v) for v in b.center],
                "extents": [float(v) for v in b.extents],
                "gaussian_count": int(b.gaussian_count),
            }
        )
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def read_bboxes_json(path: str):
    from ..decoders import SemanticBBox

    with open(path) as f:
        doc = json.load(f)
    return [
        SemanticBBox(
            entry_id=int(b["entry_id"]),
            center=np.asarray(b["center"], dtype=np.float64),
            extents=np.asarray(b["extents"], dtype=np.float64),
            gaussian_count=int(b["gaussian_count"]),
        )
        for b in doc
    ]


def write_mesh_obj(path: str, mesh) -> None:
    with open(path, "w") as f:
        has_cls = mesh.vertex_class is not None
        palette = _class_palette(int(mesh.vertex_class.max()) + 1 if has_cls and len(mesh.vertex_class) else 1)
        for i, v in enumerate(mesh.vertices):
            line = f"v {v[0]!r} {v[1]!r} {v[2]!r}"
            if has_cls:
                c = palette[mesh.vertex_class[i]] if mesh.vertex_class[i] >= 0 else (0.5, 0.5, 0.5)
                line += f" {c[0]:.4f} {c[1]:.4f} {c[2]:.4f}"
            f.write(line + "\n")
        for tri in mesh.faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def _class_palette(n: int):
    base = np.array(
        [
            [0.90, 0.10, 0.10],
            [0.10, 0.70, 0.15],
            [0.15, 0.25, 0.90],
            [0.95, 0.75, 0.10],
            [0.70, 0.15, 0.80],
            [0.10, 0.80, 0.80],
            [0.95, 0.45, 0.10],
            [0.55, 0.35, 0.20],
        ]
    )
    reps = int(np.ceil(n / len(base)))
    return np.tile(base, (reps, 1))[:n]


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def write_png(path: str, rgb: np.ndarray) -> None:
    from PIL import Image

    img = np.clip(rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def read_png(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


# ---------------------------------------------------------------------------
# SceneStream
# ---------------------------------------------------------------------------


@dataclass
class SceneStream:
    root: str
    camera: Camera
    n_frames: int
    poses: Optional[List[RigidTransform]]
    labels: Dict[int, list]

    @staticmethod
    def open(root: str) -> "SceneStream":
        intr = os.path.join(root, "intrinsics.txt")
        if not os.path.isfile(intr):
            raise MalformedStream("intrinsics.txt: missing")
        cam = read_intrinsics(intr)

        frames_dir = os.path.join(root, "frames")
        feats_dir = os.path.join(root, "features")
        if not os.path.isdir(frames_dir):
            raise MalformedStream("frames/: missing")
        n = 0
        while os.path.isfile(os.path.join(frames_dir, f"{n:05d}.png")):
            n += 1
        if n == 0:
            raise MalformedStream("frames/00000.png: missing")
        stray = [
            f
            for f in os.listdir(frames_dir)
            if f.endswith(".png") and not (f[:-4].isdigit() and int(f[:-4]) < n)
        ]
        if stray:
            raise MalformedStream(f"frames/{sorted(stray)[0]}: breaks contiguous numbering")
        for t in range(n):
            fp = os.path.join(feats_dir, f"{t:05d}.fmap")
            if not os.path.isfile(fp):
                raise MalformedStream(f"features/{t:05d}.fmap: missing")
            h, w, _ = validate_fmap(fp)
            if (h, w) != (cam.height, cam.width):
                raise MalformedStream(
                    f"features/{t:05d}.fmap: raster {h}x{w} does not match intrinsics"
                )

        poses = None
        pose_path = os.path.join(root, "poses.txt")
        if os.path.isfile(pose_path):
            poses = read_poses(pose_path)
            if len(poses) < n:
                raise MalformedStream(f"poses.txt: {len(poses)} lines for {n} frames")
        labels = {}
        lbl_path = os.path.join(root, "labels.json")
        if os.path.isfile(lbl_path):
            labels = read_labels(lbl_path)
        return SceneStream(root, cam, n, poses, labels)

    def has_pointmaps(self) -> bool:
        return os.path.isfile(os.path.join(self.root, "pointmaps", "00000.pmap"))

    def load_frame(self, t: int, with_pose: bool = True) -> FrameObservation:
        rgb = read_png(os.path.join(self.root, "frames", f"{t:05d}.png"))
        fmap = read_fmap(os.path.join(self.root, "features", f"{t:05d}.fmap"))
        pointmap = confidence = inv_depth = None
        pmap_path = os.path.join(self.root, "pointmaps", f"{t:05d}.pmap")
        if os.path.isfile(pmap_path):
            pointmap, confidence, inv_depth = read_pmap(pmap_path)
        pose = None
        if with_pose and self.poses is not None:
            pose = self.poses[t]
        frame = FrameObservation(
            index=t,
            rgb=rgb,
            feature_map=fmap,
            pointmap=pointmap,
            confidence=confidence,
            inv_depth=inv_depth,
            pose_prior=pose,
        )
        frame.validate()
        return frame

    def labels_for(self, t: int) -> list:
        return self.labels.get(t, [])
