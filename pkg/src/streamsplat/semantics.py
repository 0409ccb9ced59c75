"""Online semantic cache and knowledge-feature machinery.

The cache is an append-only registry of open-vocabulary labels. An
incoming label merges into the first existing entry whose embedding
cosine reaches the merge threshold (greedy single-linkage, first match
wins); otherwise it becomes a new entry, so pairwise entry similarity
stays below the threshold by construction.

The integrated knowledge map concatenates the similarity-weighted
semantic features with three positional channels from the frame's own
pointmap, gates everything by confidence, and renormalizes per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Camera, FrameObservation, GaussianArrays, as_arrays
from .errors import BadK, DimMismatch, EmptyLabel


@dataclass
class CacheEntry:
    label: str
    embed: np.ndarray  # unit text embedding, V-dim
    phys: Dict[str, object] = field(default_factory=dict)
    hits: int = 1
    first_seen: int = 0


class SemanticCache:
    """Single-writer registry of label entries; ids are first-seen order."""

    def __init__(self, merge_threshold: float = 0.6):
        self.merge_threshold = float(merge_threshold)
        self.entries: List[CacheEntry] = []

    def __len__(self):
        return len(self.entries)

    def embed_matrix(self, d_sem: Optional[int] = None) -> np.ndarray:
        """(Q,V) entry embeddings, optionally projected to d_sem."""
        if not self.entries:
            return np.zeros((0, d_sem if d_sem else 0))
        E = np.stack([e.embed for e in self.entries])
        if d_sem is None:
            return E
        return np.stack([project_embedding(e.embed, d_sem) for e in self.entries])


def ingest_labels(
    cache: SemanticCache,
    labels: Sequence[Tuple[str, np.ndarray, Dict[str, object]]],
    frame_index: int = 0,
) -> Tuple[SemanticCache, Dict[str, int]]:
    """Merge or append each (label, embedding, phys) triple; returns id map.

    Physical slots fuse by keeping the value of the higher-hits side, so
    an existing entry's slots win and missing slots are adopted.
    """
    id_map: Dict[str, int] = {}
    for label, embed, phys in labels:
        if label == "":
            raise EmptyLabel("label string is empty")
        e = np.asarray(embed, dtype=np.float64)
        n = np.linalg.norm(e)
        if n > 0:
            e = e / n
        match = -1
        for j, entry in enumerate(cache.entries):
            if entry.embed.shape == e.shape and float(entry.embed @ e) >= cache.merge_threshold:
                match = j
                break
        if match >= 0:
            entry = cache.entries[match]
            entry.hits += 1
            for slot, value in (phys or {}).items():
                if slot not in entry.phys:
                    entry.phys[slot] = value
            id_map[label] = match
        else:
            cache.entries.append(
                CacheEntry(label=label, embed=e, phys=dict(phys or {}), hits=1, first_seen=frame_index)
            )
            id_map[label] = len(cache.entries) - 1
    return cache, id_map


def project_embedding(embed: np.ndarray, d_sem: int) -> np.ndarray:
    """Project a V-dim text embedding onto the D_sem semantic feature space.

    Identity when dimensions match; truncate-and-renormalize when the
    embedding is wider; zero-pad when narrower.
    """
    embed = np.asarray(embed, dtype=np.float64)
    v = embed.shape[0]
    if v == d_sem:
        return embed.copy()
    if v > d_sem:
        out = embed[:d_sem].copy()
        n = np.linalg.norm(out)
        return out / n if n > 0 else out
    out = np.zeros(d_sem)
    out[:v] = embed
    return out


def _neighbor_offsets(k: int) -> List[Tuple[int, int]]:
    """The k nearest pixel offsets by (distance^2, dy, dx), excluding self."""
    r = 1
    while (2 * r + 1) ** 2 - 1 < k:
        r += 1
    offs = [
        (dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if not (dy == 0 and dx == 0)
    ]
    offs.sort(key=lambda o: (o[0] * o[0] + o[1] * o[1], o[0], o[1]))
    return offs[:k]


def category_mask(feature_map: np.ndarray, entry: CacheEntry, k: int = 8) -> np.ndarray:
    """Binary mask of one category: Otsu-thresholded cosine response,
    smoothed by majority vote among the k nearest pixels."""
    if k < 1:
        raise BadK(f"k must be >= 1, got {k}")
    h, w, d_sem = feature_map.shape
    e = project_embedding(entry.embed, d_sem)
    scores = feature_map @ e
    valid = np.any(feature_map != 0.0, axis=-1)
    if not valid.any():
        return np.zeros((h, w), dtype=bool)
    vals = scores[valid]
    if np.unique(vals).size < 2:
        mask = valid & (scores > 0.0)
    else:
        from skimage.filters import threshold_otsu

        thr = threshold_otsu(vals)
        mask = valid & (scores >= thr)

    votes = np.zeros((h, w), dtype=np.int64)
    for dy, dx in _neighbor_offsets(k):
        shifted = np.zeros((h, w), dtype=bool)
        ys0, ys1 = max(0, -dy), min(h, h - dy)
        xs0, xs1 = max(0, -dx), min(w, w - dx)
        shifted[ys0:ys1, xs0:xs1] = mask[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
        votes += shifted
    # flip only against a three-quarters supermajority: clears isolated
    # noise while leaving convex corners of coherent supports intact
    need = -(-3 * k // 4)
    out = mask.copy()
    out[votes >= need] = True
    out[k - votes >= need] = False
    return out


def knowledge_gain(geometry: float, similarity: float, confidence: float) -> float:
    """Pre-normalization magnitude of one integrated-feature pixel:
    the product of geometry weight, semantic similarity and confidence."""
    return geometry * similarity * confidence


# The positional channels are a tie-breaker for matching and decoding, not
# a rendering target in their own right: their gain keeps them well below
# the semantic block's share of the unit feature, otherwise the (camera
# frame, hence per-frame-rotating) positions dominate the knowledge loss.
GEO_GAIN = 0.25


def positional_channels(pointmap: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """gamma(X): damped positions in the open unit ball, zero where invalid."""
    norm = np.linalg.norm(pointmap, axis=-1, keepdims=True)
    gamma = GEO_GAIN * pointmap / (1.0 + norm)
    return np.where(valid[..., None], gamma, 0.0)


def integrate_feature_map(
    frame: FrameObservation, cache: SemanticCache
) -> np.ndarray:
    """H x W x (D_sem + 3) integrated knowledge map, unit rows (zero rows
    exactly where the gain vanishes, in particular at confidence 0)."""
    f_sem = np.asarray(frame.feature_map, dtype=np.float64)
    if f_sem.ndim != 3:
        raise DimMismatch(f"feature_map must be HxWxD, got {f_sem.shape}")
    h, w, d_sem = f_sem.shape
    if frame.rgb.shape[:2] != (h, w):
        raise DimMismatch("feature_map raster does not match the frame")

    conf = frame.confidence if frame.confidence is not None else np.ones((h, w))

    has_sem = np.any(f_sem != 0.0, axis=-1)
    if len(cache) > 0:
        E = cache.embed_matrix(d_sem)  # (Q, d_sem)
        sim = np.clip((f_sem @ E.T).max(axis=-1), 0.0, 1.0)
        sim = np.where(has_sem, sim, 1.0)
    else:
        sim = np.ones((h, w))

    if frame.pointmap is not None:
        pm_valid = np.all(np.isfinite(frame.pointmap), axis=-1) & (conf > 0.0)
        gamma = positional_channels(np.nan_to_num(frame.pointmap), pm_valid)
        geo = np.where(pm_valid, np.linalg.norm(gamma, axis=-1), 1.0)
    else:
        gamma = np.zeros((h, w, 3))
        geo = np.ones((h, w))

    direction = np.concatenate([sim[..., None] * f_sem, gamma], axis=-1)
    dnorm = np.linalg.norm(direction, axis=-1)
    gain = knowledge_gain(geo, sim, conf)
    live = (gain > 0.0) & (dnorm > 0.0)
    out = np.zeros((h, w, d_sem + 3))
    np.divide(direction, dnorm[..., None], out=out, where=live[..., None])
    return out


@dataclass
class MatchingDistribution:
    """Windowed per-source-pixel distributions over target pixels.

    probs[y, x, o] is the mass on target pixel (y, x) + offsets[o]; invalid
    (out of bounds) offsets carry zero mass. Each row sums to 1. The target
    feature map is kept so expectations can be taken under the rows.
    """

    radius: int
    offsets: np.ndarray  # (K,2) int, (dy,dx)
    probs: np.ndarray  # (H,W,K)
    valid: np.ndarray  # (H,W,K) bool
    target_map: np.ndarray  # (H,W,D)
    src_live: np.ndarray  # (H,W) bool, source rows that carried features

    def row(self, y: int, x: int):
        """(target_pixel (M,2), mass (M,)) of one source row."""
        v = self.valid[y, x]
        pix = self.offsets[v] + np.array([y, x])
        return pix, self.probs[y, x, v]

    def expectation(self, values: Optional[np.ndarray] = None) -> np.ndarray:
        """E over each row of per-target-pixel values (default: target map)."""
        if values is None:
            values = self.target_map
        h, w, k = self.probs.shape
        out = np.zeros(values.shape[:2] + values.shape[2:])
        for o in range(k):
            dy, dx = self.offsets[o]
            p = self.probs[:, :, o]
            ys0, ys1 = max(0, -dy), min(h, h - dy)
            xs0, xs1 = max(0, -dx), min(w, w - dx)
            out[ys0:ys1, xs0:xs1] += (
                p[ys0:ys1, xs0:xs1, None] * values[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
            )
        return out


def matching_distribution(
    f_src: np.ndarray,
    f_tgt: np.ndarray,
    tau: float = 0.07,
    radius: int = 16,
) -> MatchingDistribution:
    """Row-wise softmax of windowed feature cosines at temperature tau.

    Zero-feature source pixels get a uniform row over their valid window.
    """
    if f_src.shape != f_tgt.shape:
        raise DimMismatch(f"feature maps {f_src.shape} vs {f_tgt.shape}")
    h, w, _ = f_src.shape
    r = int(radius)
    offsets = np.array(
        [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)], dtype=np.int64
    )
    k = offsets.shape[0]
    scores = np.full((h, w, k), -np.inf)
    valid = np.zeros((h, w, k), dtype=bool)
    for o in range(k):
        dy, dx = offsets[o]
        ys0, ys1 = max(0, -dy), min(h, h - dy)
        xs0, xs1 = max(0, -dx), min(w, w - dx)
        if ys0 >= ys1 or xs0 >= xs1:
            continue
        dots = np.einsum(
            "ijd,ijd->ij",
            f_src[ys0:ys1, xs0:xs1],
            f_tgt[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx],
        )
        scores[ys0:ys1, xs0:xs1, o] = dots
        valid[ys0:ys1, xs0:xs1, o] = True

    src_zero = ~np.any(f_src != 0.0, axis=-1)
    with np.errstate(over="ignore"):
        mx = np.where(valid, scores, -np.inf).max(axis=-1, keepdims=True)
        ex = np.exp((scores - mx) / tau, where=valid, out=np.zeros_like(scores))
    ex[~valid] = 0.0
    # uniform rows for zero-feature sources
    ex[src_zero] = valid[src_zero].astype(np.float64)
    probs = ex / ex.sum(axis=-1, keepdims=True)
    return MatchingDistribution(
        radius=r,
        offsets=offsets,
        probs=probs,
        valid=valid,
        target_map=np.asarray(f_tgt),
        src_live=~src_zero,
    )


def forward_warp(
    gaussians,
    m: MatchingDistribution,
    cam_prev: Camera,
    cam_now: Camera,
    beta: float = 0.3,
    near: float = 0.01,
) -> GaussianArrays:
    """Blend each previously-visible Gaussian's feature toward the
    expectation of the current map under its source pixel's matching row.

    Geometry is untouched; features stay unit-normalized. cam_now is part
    of the warp contract (the target map lives in its raster) but only the
    previous camera determines source pixels.
    """
    arrays = as_arrays(gaussians).copy()
    if beta == 0.0 or len(arrays) == 0:
        return arrays
    exp_map = m.expectation()
    if exp_map.shape[2] != arrays.feat_dim:
        raise DimMismatch(
            f"matching target dim {exp_map.shape[2]} vs feature dim {arrays.feat_dim}"
        )
    xy, z = cam_prev.project_points(arrays.mu)
    h, w = cam_prev.height, cam_prev.width
    px = np.floor(xy[:, 0]).astype(np.int64)
    py = np.floor(xy[:, 1]).astype(np.int64)
    vis = (z > near) & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    # only warp from source pixels that carried knowledge; zero-feature
    # rows are uniform and would blend in an arbitrary window average
    vis[vis] &= m.src_live[py[vis], px[vis]]
    idx = np.nonzero(vis)[0]
    if idx.size == 0:
        return arrays
    blended = (1.0 - beta) * arrays.feat[idx] + beta * exp_map[py[idx], px[idx]]
    norms = np.linalg.norm(blended, axis=1)
    ok = norms > 0
    arrays.feat[idx[ok]] = blended[ok] / norms[ok][:, None]
    return arrays


def assign_sem_ids(gaussians, cache: SemanticCache) -> np.ndarray:
    """argmax cache entry for each Gaussian's semantic feature block (-1 if none)."""
    arrays = as_arrays(gaussians)
    n = len(arrays)
    out = np.full(n, -1, dtype=np.int64)
    if len(cache) == 0 or n == 0:
        return out
    d_sem = max(arrays.feat_dim - 3, 0)
    if d_sem == 0:
        return out
    E = cache.embed_matrix(d_sem)
    sem = arrays.feat[:, :d_sem]
    live = np.linalg.norm(sem, axis=1) > 1e-9
    scores = sem @ E.T
    out[live] = np.argmax(scores[live], axis=1)
    return out
