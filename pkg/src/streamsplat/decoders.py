"""Multi-level decoders from the Gaussian store to task outputs.

* Gaussian-to-voxel splatting: per voxel center o, phi(o) = sum_i d_i *
  G_i(o) * alpha_i with d_i the Gaussian's 1-sigma chord along its longest
  grid axis clamped to the voxel size; occupancy is 1 - exp(-phi) and the
  per-voxel class distribution is a softmax over the accumulated semantic
  response.
* 3D boxes: k-NN connectivity per semantic class, connected components of
  at least min_cluster members, axis-aligned spans of mu +/- 2 exp(scale).
* Meshes: per-camera rendered depth fused into a TSDF (weighted mean over
  cameras, order-invariant), zero level set by marching cubes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import Camera, GaussianArrays, as_arrays, quat_to_matrix_batch, sigmoid
from .errors import EmptyStore, EmptyTSDF
from .rasterizer import render
from .rasterizer.kernels import DEPTH_SENTINEL
from .semantics import SemanticCache

FOOTPRINT_MAHA2 = 9.0


@dataclass
class OccupancyGrid:
    origin: np.ndarray  # (3,) world position of voxel (0,0,0) corner
    voxel_size: float
    dims: np.ndarray  # (3,) ints
    occupancy: np.ndarray  # dims, in [0,1]
    semantics: np.ndarray  # dims + (Q,), rows sum to 1 where occupied

    def voxel_centers(self) -> np.ndarray:
        ii, jj, kk = np.meshgrid(
            np.arange(self.dims[0]), np.arange(self.dims[1]), np.arange(self.dims[2]),
            indexing="ij",
        )
        idx = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
        return self.origin + (idx + 0.5) * self.voxel_size


@dataclass
class SemanticBBox:
    entry_id: int
    center: np.ndarray
    extents: np.ndarray  # full axis-aligned side lengths
    gaussian_count: int

    @property
    def lo(self):
        return self.center - 0.5 * self.extents

    @property
    def hi(self):
        return self.center + 0.5 * self.extents


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V,3)
    faces: np.ndarray  # (F,3) int
    vertex_class: Optional[np.ndarray] = None  # (V,) int, -1 = none


def _axis_sigmas(arrays: GaussianArrays) -> np.ndarray:
    """Per-axis standard deviations sqrt(Sigma_kk) of each Gaussian."""
    R = quat_to_matrix_batch(arrays.quat)
    s2 = np.exp(2.0 * arrays.scale)
    return np.sqrt(np.einsum("nkj,nj->nk", R**2, s2))


def grid_for_store(arrays: GaussianArrays, voxel_size: float):
    """Origin and dims of a voxel grid covering means +/- 3 sigma."""
    sig = _axis_sigmas(arrays)
    lo = (arrays.mu - 3.0 * sig).min(axis=0)
    hi = (arrays.mu + 3.0 * sig).max(axis=0)
    origin = np.floor(lo / voxel_size) * voxel_size
    dims = np.maximum(np.ceil((hi - origin) / voxel_size).astype(np.int64), 1)
    return origin, dims


def _chord_weights(arrays: GaussianArrays, voxel_size: float) -> np.ndarray:
    """Occupied-range weight d_i: longest 1-sigma axis chord, clamped."""
    sig = _axis_sigmas(arrays)
    chord = 2.0 * sig.max(axis=1)
    return np.minimum(chord, voxel_size)


def splat_to_grid(
    arrays: GaussianArrays,
    origin: np.ndarray,
    dims: np.ndarray,
    voxel_size: float,
    sem_dim: int = 0,
):
    """Accumulate phi and the semantic response on an explicit grid."""
    nx, ny, nz = (int(d) for d in dims)
    phi = np.zeros((nx, ny, nz))
    sem = np.zeros((nx, ny, nz, sem_dim)) if sem_dim else None

    R = quat_to_matrix_batch(arrays.quat)
    s2 = np.exp(2.0 * arrays.scale)
    alpha = sigmoid(arrays.opacity_logit)
    d_w = _chord_weights(arrays, voxel_size)
    sig = _axis_sigmas(arrays)

    for i in range(len(arrays)):
        lo_i = np.maximum(
            np.floor((arrays.mu[i] - 3.0 * sig[i] - origin) / voxel_size).astype(np.int64), 0
        )
        hi_i = np.minimum(
            np.ceil((arrays.mu[i] + 3.0 * sig[i] - origin) / voxel_size).astype(np.int64),
            dims,
        )
        if np.any(lo_i >= hi_i):
            continue
        xs = origin[0] + (np.arange(lo_i[0], hi_i[0]) + 0.5) * voxel_size
        ys = origin[1] + (np.arange(lo_i[1], hi_i[1]) + 0.5) * voxel_size
        zs = origin[2] + (np.arange(lo_i[2], hi_i[2]) + 0.5) * voxel_size
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        d = np.stack([gx, gy, gz], axis=-1) - arrays.mu[i]
        # Sigma^-1 = R S^-2 R^T
        local = d @ R[i]  # components along principal axes
        m = (local * local / s2[i]).sum(axis=-1)
        g = np.where(m <= FOOTPRINT_MAHA2, np.exp(-0.5 * m), 0.0)
        contrib = d_w[i] * alpha[i] * g
        phi[lo_i[0] : hi_i[0], lo_i[1] : hi_i[1], lo_i[2] : hi_i[2]] += contrib
        if sem is not None:
            sem_feat = arrays.feat[i, :sem_dim]
            sem[lo_i[0] : hi_i[0], lo_i[1] : hi_i[1], lo_i[2] : hi_i[2]] += (
                contrib[..., None] * sem_feat
            )
    return phi, sem


def _class_embeds(arrays: GaussianArrays, cache: Optional[SemanticCache]):
    d_sem = max(arrays.feat_dim - 3, 0)
    if cache is not None and len(cache) and d_sem:
        return cache.embed_matrix(d_sem), d_sem
    return np.eye(d_sem), d_sem


def gaussian_to_voxel(
    gaussians, voxel_size: float, cache: Optional[SemanticCache] = None
) -> OccupancyGrid:
    """Splat the store into a semantic occupancy grid."""
    arrays = as_arrays(gaussians)
    if len(arrays) == 0:
        raise EmptyStore("cannot voxelize an empty store")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    origin, dims = grid_for_store(arrays, voxel_size)
    embeds, d_sem = _class_embeds(arrays, cache)
    phi, sem_resp = splat_to_grid(arrays, origin, dims, voxel_size, d_sem)
    occupancy = 1.0 - np.exp(-phi)

    q = embeds.shape[0]
    semantics = np.zeros(phi.shape + (q,))
    if q and sem_resp is not None:
        scores = sem_resp @ embeds.T
        occupied = phi > 0.0
        sc = scores[occupied]
        sc = sc - sc.max(axis=-1, keepdims=True)
        ex = np.exp(sc)
        semantics[occupied] = ex / ex.sum(axis=-1, keepdims=True)
    return OccupancyGrid(origin, float(voxel_size), dims, occupancy, semantics)


def extract_bboxes(
    gaussians,
    cache: Optional[SemanticCache] = None,
    k: int = 8,
    min_cluster: int = 20,
) -> List[SemanticBBox]:
    """Axis-aligned instance boxes per semantic class via k-NN components."""
    arrays = as_arrays(gaussians)
    boxes: List[SemanticBBox] = []
    if len(arrays) == 0:
        return boxes
    ext = 2.0 * np.exp(arrays.scale)
    classes = [int(q) for q in np.unique(arrays.sem_id) if q >= 0]
    for q in classes:
        members = np.nonzero(arrays.sem_id == q)[0]
        if members.size < min_cluster:
            continue
        pts = arrays.mu[members]
        kq = min(k + 1, members.size)
        dist, idx = cKDTree(pts).query(pts, k=kq)
        med_nn = np.median(dist[:, 1])
        limit = 3.0 * med_nn if med_nn > 0 else np.inf
        uf = np.arange(members.size)

        def find(i):
            while uf[i] != i:
                uf[i] = uf[uf[i]]
                i = uf[i]
            return i

        for a in range(members.size):
            for j in range(1, kq):
                if dist[a, j] <= limit:
                    ra, rb = find(a), find(int(idx[a, j]))
                    if ra != rb:
                        uf[max(ra, rb)] = min(ra, rb)
        roots = np.array([find(i) for i in range(members.size)])
        for r in np.unique(roots):
            comp = members[roots == r]
            if comp.size < min_cluster:
                continue
            lo = (arrays.mu[comp] - ext[comp]).min(axis=0)
            hi = (arrays.mu[comp] + ext[comp]).max(axis=0)
            boxes.append(
                SemanticBBox(
                    entry_id=q,
                    center=0.5 * (lo + hi),
                    extents=hi - lo,
                    gaussian_count=int(comp.size),
                )
            )
    return boxes


def fuse_tsdf(
    arrays: GaussianArrays,
    cameras: Sequence[Camera],
    origin: np.ndarray,
    dims: np.ndarray,
    voxel_size: float,
    trunc: float,
    near: float = 0.01,
    tile_size: int = 16,
    min_alpha: float = 0.8,
):
    """Depth-render every camera and fuse into (tsdf, weight) grids.

    Accumulates sums and divides once, so fusion is camera-order-invariant
    up to floating-point associativity.
    """
    nx, ny, nz = (int(d) for d in dims)
    idx = np.stack(
        np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1
    ).reshape(-1, 3)
    centers = origin + (idx + 0.5) * voxel_size
    acc = np.zeros(centers.shape[0])
    wsum = np.zeros(centers.shape[0])

    for cam in cameras:
        out = render(arrays, cam, channels=("depth", "alpha"), near=near, tile_size=tile_size)
        pc = cam.pose.apply(centers)
        z = pc[:, 2]
        ok = z > near
        px = np.full(centers.shape[0], -1, dtype=np.int64)
        py = np.full(centers.shape[0], -1, dtype=np.int64)
        px[ok] = np.floor(cam.fx * pc[ok, 0] / z[ok] + cam.cx).astype(np.int64)
        py[ok] = np.floor(cam.fy * pc[ok, 1] / z[ok] + cam.cy).astype(np.int64)
        ok &= (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        d_img = out.depth[py[ok], px[ok]]
        a_img = out.alpha[py[ok], px[ok]]
        # grazing/silhouette pixels carry badly mixed expected depth;
        # weight by rendered alpha and skip unreliable pixels entirely
        valid = (d_img != DEPTH_SENTINEL) & (a_img >= min_alpha)
        sdf = d_img[valid] - z[ok][valid]
        keep = sdf > -trunc
        tv = np.clip(sdf[keep] / trunc, -1.0, 1.0)
        wv = a_img[valid][keep]
        flat_idx = np.nonzero(ok)[0][valid][keep]
        np.add.at(acc, flat_idx, wv * tv)
        np.add.at(wsum, flat_idx, wv)

    weight = wsum.reshape(nx, ny, nz)
    tsdf = np.full((nx, ny, nz), np.nan)
    covered = weight > 0
    tsdf[covered] = (acc.reshape(nx, ny, nz))[covered] / weight[covered]
    return tsdf, weight


def extract_mesh(
    gaussians,
    cameras: Sequence[Camera],
    voxel_size: float,
    trunc: Optional[float] = None,
    cache: Optional[SemanticCache] = None,
    near: float = 0.01,
) -> TriangleMesh:
    """TSDF-fused triangle mesh with optional per-vertex class labels."""
    arrays = as_arrays(gaussians)
    if len(arrays) == 0:
        raise EmptyStore("cannot mesh an empty store")
    if not cameras:
        raise ValueError("need at least one camera")
    if trunc is None:
        trunc = 4.0 * voxel_size
    if trunc < voxel_size:
        raise ValueError("truncation must be >= voxel_size")

    origin, dims = grid_for_store(arrays, voxel_size)
    tsdf, weight = fuse_tsdf(arrays, cameras, origin, dims, voxel_size, trunc, near)
    if not (weight > 0).any():
        raise EmptyTSDF("no depth coverage on the voxel grid")

    from skimage.measure import marching_cubes

    vol = np.where(weight > 0, tsdf, 1.0)
    try:
        verts, faces, _, _ = marching_cubes(
            vol, level=0.0, spacing=(voxel_size,) * 3, mask=weight > 0
        )
    except (ValueError, RuntimeError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), None)

    # marching_cubes samples values at voxel indices; our field lives at centers
    verts = verts + origin + 0.5 * voxel_size
    faces = faces.astype(np.int64)

    # drop zero-area faces
    if faces.shape[0]:
        v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
        area2 = np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
        faces = faces[area2 > 1e-18]

    vertex_class = None
    d_sem = max(arrays.feat_dim - 3, 0)
    if d_sem:
        grid = gaussian_to_voxel(arrays, voxel_size, cache)
        vi = np.clip(
            np.floor((verts - grid.origin) / voxel_size).astype(np.int64),
            0,
            grid.dims - 1,
        )
        occ = grid.occupancy[vi[:, 0], vi[:, 1], vi[:, 2]]
        cls = np.argmax(grid.semantics[vi[:, 0], vi[:, 1], vi[:, 2]], axis=-1)
        vertex_class = np.where(occ > 0, cls, -1).astype(np.int64)

    return TriangleMesh(verts, faces, vertex_class)
