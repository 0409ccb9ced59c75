"""Online keypoint-graph visual odometry.

Pointmaps, confidence maps and inverse depth arrive with each frame (the
dense estimator itself is upstream of this engine); this module samples
keypoints from them, links consecutive frames by mutual-nearest patch
descriptors, initializes poses by weighted rigid Procrustes alignment and
refines a sliding window with Levenberg-Marquardt on a Huber-robust
reprojection cost. The oldest pose in the window is held fixed as gauge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core import Camera, FrameObservation, RigidTransform, skew
from .errors import DegenerateAlignment, NoGeometrySource

PATCH = 3  # descriptor patch half-width (7x7 gray patches)
NEAR = 0.01


@dataclass
class FrameKeypoints:
    xy: np.ndarray  # (K,2) pixel coordinates (x, y)
    pts: np.ndarray  # (K,3) camera-frame 3D points
    conf: np.ndarray  # (K,)
    desc: np.ndarray  # (K,Dd) normalized patch descriptors
    contrast: np.ndarray  # (K,) pre-normalization patch energy


@dataclass
class GraphEdge:
    """Correspondences between two frames: 3D points in each frame's own
    camera coordinates plus the observed pixels in the opposite frame."""

    a: int  # earlier frame index
    b: int  # later frame index
    pts_a: np.ndarray  # (M,3)
    xy_a: np.ndarray  # (M,2)
    pts_b: np.ndarray  # (M,3)
    xy_b: np.ndarray  # (M,2)
    weight: np.ndarray  # (M,)
    mean_conf: float


@dataclass
class GraphNode:
    index: int
    pose: RigidTransform
    keypoints: Optional[FrameKeypoints] = None
    pointmap: Optional[np.ndarray] = None
    inv_depth: Optional[np.ndarray] = None
    rgb: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None


@dataclass
class PointCloud:
    points: np.ndarray  # (M,3) world
    colors: np.ndarray  # (M,3)
    feats: Optional[np.ndarray]  # (M,D) integrated features
    pixels: np.ndarray  # (M,2) source (row, col)


class KeypointGraph:
    """Per-frame nodes plus confidence-weighted correspondence edges."""

    def __init__(self, cam: Camera, window: int = 8):
        self.cam = cam
        self.window = int(window)
        self.nodes: List[GraphNode] = []
        self.edges: List[GraphEdge] = []

    def node(self, frame_index: int) -> GraphNode:
        for n in self.nodes:
            if n.index == frame_index:
                return n
        raise KeyError(f"no node for frame {frame_index}")

    @property
    def poses(self) -> List[RigidTransform]:
        return [n.pose for n in self.nodes]


KEYPOINT_MIN_CONF = 0.5


def extract_keypoints(
    frame: FrameObservation,
    stride: int = 8,
    margin: int = PATCH,
    min_conf: float = KEYPOINT_MIN_CONF,
) -> Optional[FrameKeypoints]:
    """Uniform grid plus Harris corners, each carrying its pointmap 3D point.

    Pixels below the confidence floor (soft silhouettes, unreliable
    geometry) never become keypoints.
    """
    if frame.pointmap is None:
        return None
    h, w = frame.shape
    conf = frame.confidence if frame.confidence is not None else np.ones((h, w))
    gray = frame.rgb.mean(axis=2)

    ys, xs = np.mgrid[stride // 2 : h : stride, stride // 2 : w : stride]
    coords = {(int(y), int(x)) for y, x in zip(ys.ravel(), xs.ravel())}

    from skimage.feature import corner_harris, corner_peaks

    corners = corner_peaks(corner_harris(gray), min_distance=3, threshold_rel=0.05)
    for y, x in corners:
        coords.add((int(y), int(x)))

    rows = []
    for y, x in sorted(coords):
        if not (margin <= y < h - margin and margin <= x < w - margin):
            continue
        p = frame.pointmap[y, x]
        c = conf[y, x]
        if not np.all(np.isfinite(p)) or c < min_conf:
            continue
        patch = gray[y - PATCH : y + PATCH + 1, x - PATCH : x + PATCH + 1].ravel()
        d = patch - patch.mean()
        n = np.linalg.norm(d)
        rows.append((x + 0.5, y + 0.5, p, c, d / n if n > 0 else d, n))
    if not rows:
        return None
    return FrameKeypoints(
        xy=np.array([(r[0], r[1]) for r in rows]),
        pts=np.stack([r[2] for r in rows]).astype(np.float64),
        conf=np.array([r[3] for r in rows], dtype=np.float64),
        desc=np.stack([r[4] for r in rows]),
        contrast=np.array([r[5] for r in rows], dtype=np.float64),
    )


FLOW_PATCH = PATCH  # NCC patch half-width (7x7)
FLOW_SEARCH = 10  # search half-window in pixels around the predicted pixel
MIN_NCC = 0.5


def _bilinear(img: np.ndarray, x: float, y: float):
    h, w = img.shape[:2]
    x = min(max(x, 0.0), w - 1.001)
    y = min(max(y, 0.0), h - 1.001)
    x0, y0 = int(x), int(y)
    fx, fy = x - x0, y - y0
    a = img[y0, x0] * (1 - fx) + img[y0, min(x0 + 1, w - 1)] * fx
    b = img[min(y0 + 1, h - 1), x0] * (1 - fx) + img[min(y0 + 1, h - 1), min(x0 + 1, w - 1)] * fx
    return a * (1 - fy) + b * fy


def flow_correspondences(
    kps_a: FrameKeypoints,
    data_b,
    cam: Camera,
    t_init: Optional[RigidTransform] = None,
    search: int = FLOW_SEARCH,
):
    """Patch-flow correspondences of frame-a keypoints into frame b.

    For each keypoint, the 3D point is carried through the motion prior
    `t_init` (b->a convention, so its inverse predicts the pixel in b) and
    the best normalized-cross-correlation patch within a pixel window
    around that prediction gives the match, refined to sub-pixel by a
    quadratic fit. Dense pixel search makes the true correspondent always
    a candidate, which sparse keypoint-to-keypoint matching cannot
    guarantee; each match carries partial (aperture-limited) information
    that the rigid fit pools globally.

    Returns (idx_a, xy_b (M,2), pts_b (M,3), weight (M,), conf (M,));
    weight folds the NCC score into the confidence, conf is confidence only.
    """
    pointmap_b, rgb_b, conf_b = data_b
    h, w = rgb_b.shape[:2]
    gray_b = rgb_b.mean(axis=2)
    conf_b = conf_b if conf_b is not None else np.ones((h, w))
    t_ba = (t_init or RigidTransform.identity()).inverse()

    pred = t_ba.apply(kps_a.pts)
    ok_pred = pred[:, 2] > NEAR
    px = cam.fx * pred[:, 0] / np.where(ok_pred, pred[:, 2], 1.0) + cam.cx
    py = cam.fy * pred[:, 1] / np.where(ok_pred, pred[:, 2], 1.0) + cam.cy

    p = FLOW_PATCH
    idx_a, xy_b, pts_b, weight, conf = [], [], [], [], []
    for i in range(len(kps_a.xy)):
        if not ok_pred[i]:
            continue
        cx, cy = px[i], py[i]
        if not (
            p + search <= cx < w - p - search and p + search <= cy < h - p - search
        ):
            continue  # search window would leave the image
        patch = kps_a.desc[i]
        icx, icy = int(round(cx - 0.5)), int(round(cy - 0.5))
        best = -2.0
        bx = by = 0
        scores = np.full((2 * search + 1, 2 * search + 1), -2.0)
        for dy in range(-search, search + 1):
            yy = icy + dy
            for dx in range(-search, search + 1):
                xx = icx + dx
                cand = gray_b[yy - p : yy + p + 1, xx - p : xx + p + 1].ravel()
                cand = cand - cand.mean()
                n = np.linalg.norm(cand)
                if n <= 1e-12:
                    continue
                s = float(patch @ (cand / n))
                scores[dy + search, dx + search] = s
                if s > best:
                    best = s
                    bx, by = dx, dy
        if best < MIN_NCC:
            continue  # textureless or occluded: no reliable flow here
        myi, mxi = icy + by, icx + bx
        if not np.all(np.isfinite(pointmap_b[myi, mxi])):
            continue
        neigh = pointmap_b[max(myi - 1, 0) : myi + 2, max(mxi - 1, 0) : mxi + 2, 2]
        neigh = neigh[np.isfinite(neigh)]
        if neigh.size and (neigh.max() - neigh.min()) > 0.3:
            continue  # depth discontinuity: interpolation would lie here
        # sub-pixel peak via 1D quadratic fits; the 3D point is interpolated
        # at the same sub-pixel spot, so the (ray, point) pair stays
        # consistent (valid on smooth surfaces, which the gate guarantees)
        sx = sy = 0.0
        iy, ix = by + search, bx + search
        if 0 < ix < 2 * search and np.all(scores[iy, ix - 1 : ix + 2] > -2.0):
            l, c, r = scores[iy, ix - 1 : ix + 2]
            den = l - 2 * c + r
            if den < -1e-12:
                sx = float(np.clip(0.5 * (l - r) / den, -0.5, 0.5))
        if 0 < iy < 2 * search and np.all(scores[iy - 1 : iy + 2, ix] > -2.0):
            l, c, r = scores[iy - 1 : iy + 2, ix]
            den = l - 2 * c + r
            if den < -1e-12:
                sy = float(np.clip(0.5 * (l - r) / den, -0.5, 0.5))
        mx = mxi + sx + 0.5
        my = myi + sy + 0.5
        point = _bilinear(pointmap_b, mx - 0.5, my - 0.5)
        if not np.all(np.isfinite(point)):
            continue
        c_b = float(conf_b[myi, mxi])
        if c_b < KEYPOINT_MIN_CONF:
            continue
        idx_a.append(i)
        xy_b.append((mx, my))
        pts_b.append(point)
        c_min = min(kps_a.conf[i], c_b)
        conf.append(c_min)
        distinct = min(1.0, kps_a.contrast[i] / 0.1)
        weight.append(c_min * best * distinct)
    if not idx_a:
        return (
            np.zeros(0, np.int64),
            np.zeros((0, 2)),
            np.zeros((0, 3)),
            np.zeros(0),
            np.zeros(0),
        )
    return (
        np.array(idx_a, dtype=np.int64),
        np.array(xy_b),
        np.array(pts_b),
        np.array(weight),
        np.array(conf),
    )


def register_frames(
    kps_a: FrameKeypoints,
    data_b,
    cam: Camera,
    t_init: Optional[RigidTransform] = None,
    rounds: int = 2,
) -> RigidTransform:
    """Relative transform mapping frame-b camera points into frame-a's,
    from patch-flow correspondences and trimmed weighted Procrustes,
    iterated so the prediction window tightens around the solution."""
    t_ab = t_init or RigidTransform.identity()
    for r in range(max(rounds, 1)):
        idx_a, xy_b, pts_b, wgt, _ = flow_correspondences(
            kps_a, data_b, cam, t_ab, search=FLOW_SEARCH if r == 0 else 4
        )
        if idx_a.size < 3:
            raise DegenerateAlignment("fewer than 3 flow correspondences")
        t_ab = trimmed_procrustes(pts_b, kps_a.pts[idx_a], wgt)
    return t_ab


def weighted_procrustes(X: np.ndarray, Y: np.ndarray, w: np.ndarray) -> RigidTransform:
    """Rigid T minimizing sum w ||Y - (R X + t)||^2."""
    if X.shape[0] < 3:
        raise DegenerateAlignment(f"need >= 3 correspondences, got {X.shape[0]}")
    ws = w / w.sum()
    xb = ws @ X
    yb = ws @ Y
    H = (X - xb).T @ ((Y - yb) * ws[:, None])
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    return RigidTransform(R, yb - R @ xb)


def trimmed_procrustes(
    X: np.ndarray, Y: np.ndarray, w: np.ndarray, rounds: int = 2
) -> RigidTransform:
    """Procrustes with residual trimming at 3x the median, for mismatch robustness."""
    keep = np.ones(X.shape[0], dtype=bool)
    T = weighted_procrustes(X, Y, w)
    for _ in range(rounds):
        r = np.linalg.norm(T.apply(X) - Y, axis=1)
        med = np.median(r[keep])
        if med <= 0:
            break
        new_keep = r <= 3.0 * med
        if new_keep.sum() < 3 or np.array_equal(new_keep, keep):
            break
        keep = new_keep
        T = weighted_procrustes(X[keep], Y[keep], w[keep])
    return T


def ingest_frame(
    graph: KeypointGraph,
    frame: FrameObservation,
    rho: float,
    stride: int = 8,
) -> Tuple[KeypointGraph, RigidTransform]:
    """Add a node for the frame and estimate its initial pose.

    With a pose prior the prior is taken verbatim (ground-truth-pose mode).
    Otherwise keypoints are matched against up to the 3 most recent nodes;
    edges whose mean correspondence confidence falls below rho are dropped,
    and the initial pose comes from weighted rigid Procrustes alignment to
    the previous node.
    """
    if frame.pointmap is None and frame.inv_depth is None and frame.pose_prior is None:
        raise NoGeometrySource(f"frame {frame.index} has neither geometry nor a pose prior")

    kps = extract_keypoints(frame, stride=stride)

    if frame.pose_prior is not None:
        pose = frame.pose_prior
    elif not graph.nodes:
        pose = RigidTransform.identity()
    else:
        if kps is None:
            raise DegenerateAlignment(f"frame {frame.index} has no usable keypoints")
        # constant-velocity prediction of the new pose seeds the registration
        if len(graph.nodes) >= 2:
            vel = graph.nodes[-1].pose.compose(graph.nodes[-2].pose.inverse())
            predicted = vel.compose(graph.nodes[-1].pose)
        else:
            predicted = graph.nodes[-1].pose
        frame_data = (frame.pointmap, frame.rgb, frame.confidence)
        new_edges = []
        prev_edge = None
        pose = None
        for back, node in enumerate(reversed(graph.nodes[-3:])):
            if node.keypoints is None or node.pointmap is None:
                continue
            t_init = node.pose.compose(predicted.inverse())
            try:
                t_rel = register_frames(node.keypoints, frame_data, graph.cam, t_init)
            except DegenerateAlignment:
                continue
            idx_a, xy_b, pts_b, weight, conf = flow_correspondences(
                node.keypoints, frame_data, graph.cam, t_rel, search=4
            )
            if idx_a.size == 0:
                continue
            mean_conf = float(conf.mean())
            if mean_conf < rho:
                continue
            edge = GraphEdge(
                a=node.index,
                b=frame.index,
                pts_a=node.keypoints.pts[idx_a],
                xy_a=node.keypoints.xy[idx_a],
                pts_b=pts_b,
                xy_b=xy_b,
                weight=weight,
                mean_conf=mean_conf,
            )
            new_edges.append(edge)
            if back == 0:
                prev_edge = edge
                pose = t_rel.inverse().compose(node.pose)
        if prev_edge is None or prev_edge.pts_a.shape[0] < 3 or pose is None:
            raise DegenerateAlignment(
                f"frame {frame.index}: <3 confident correspondences to the previous node"
            )
        graph.edges.extend(new_edges)

    graph.nodes.append(
        GraphNode(
            index=frame.index,
            pose=pose,
            keypoints=kps,
            pointmap=frame.pointmap,
            inv_depth=frame.inv_depth,
            rgb=frame.rgb,
            confidence=frame.confidence,
        )
    )
    # heavy rasters are only needed inside the adjustment window
    for node in graph.nodes[: -graph.window]:
        node.pointmap = None
        node.inv_depth = None
        node.rgb = None
        node.confidence = None
    return graph, pose


def _pi_jacobian(cam: Camera, Y: np.ndarray) -> np.ndarray:
    z = Y[2]
    return np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * Y[0] / (z * z)],
            [0.0, cam.fy / z, -cam.fy * Y[1] / (z * z)],
        ]
    )


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:1] + (3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _edge_residuals(cam: Camera, pa, pb, edge):
    """Both-direction reprojection residuals for one edge."""
    out = []
    t_ba = pb.compose(pa.inverse())
    t_ab = t_ba.inverse()
    for direction in (0, 1):
        if direction == 0:
            X = edge.pts_a
            U = edge.xy_b
            T = t_ba
        else:
            X = edge.pts_b
            U = edge.xy_a
            T = t_ab
        Y = T.apply(X)
        ok = Y[:, 2] > NEAR
        zsafe = np.where(ok, Y[:, 2], 1.0)
        proj = np.stack(
            [cam.fx * Y[:, 0] / zsafe + cam.cx, cam.fy * Y[:, 1] / zsafe + cam.cy],
            axis=1,
        )
        r = proj - U
        out.append((direction, ok, X, Y, r, edge.weight))
    return out


def _huber_rho(e: np.ndarray, delta: float) -> np.ndarray:
    small = e <= delta
    return np.where(small, 0.5 * e * e, delta * (e - 0.5 * delta))


def _huber_w(e: np.ndarray, delta: float) -> np.ndarray:
    return np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-12))


def _window_cost(cam, poses, window_edges, huber_px):
    cost = 0.0
    for edge, sa, sb in window_edges:
        entries = _edge_residuals(cam, poses[sa], poses[sb], edge)
        for _, ok, _, _, r, w in entries:
            e = np.linalg.norm(r[ok], axis=1)
            cost += float((w[ok] * _huber_rho(e, huber_px)).sum())
    return cost


def local_bundle_adjust(
    graph: KeypointGraph,
    window: int = 8,
    iters: int = 20,
    huber_px: float = 2.0,
):
    """Levenberg-Marquardt refinement of the last `window` poses.

    Returns (graph, final_cost, converged). Accepted steps never increase
    the robust cost; `converged` is False when no step was accepted.
    """
    nodes = graph.nodes[-window:]
    if len(nodes) < 2:
        return graph, 0.0, True
    slot_of = {n.index: i for i, n in enumerate(nodes)}
    cam = graph.cam

    window_edges = []
    for e in graph.edges:
        if e.a in slot_of and e.b in slot_of and e.pts_a.shape[0] > 0:
            window_edges.append((e, slot_of[e.a], slot_of[e.b]))
    if not window_edges:
        return graph, 0.0, True

    poses = [n.pose for n in nodes]
    nvar = len(nodes) - 1  # slot 0 is gauge
    cost = _window_cost(cam, poses, window_edges, huber_px)
    lam = 1e-3
    improved = False

    for _ in range(iters):
        H = np.zeros((6 * nvar, 6 * nvar))
        g = np.zeros(6 * nvar)
        for edge, sa, sb in window_edges:
            entries = _edge_residuals(cam, poses[sa], poses[sb], edge)
            for direction, ok, X, Y, r, wconf in entries:
                if not ok.any():
                    continue
                src, dst = (sa, sb) if direction == 0 else (sb, sa)
                t_rel = poses[dst].compose(poses[src].inverse())
                Xv, Yv, rv = X[ok], Y[ok], r[ok]
                e = np.linalg.norm(rv, axis=1)
                wt = wconf[ok] * _huber_w(e, huber_px)
                m = Xv.shape[0]
                z = Yv[:, 2]
                dpi = np.zeros((m, 2, 3))
                dpi[:, 0, 0] = cam.fx / z
                dpi[:, 0, 2] = -cam.fx * Yv[:, 0] / (z * z)
                dpi[:, 1, 1] = cam.fy / z
                dpi[:, 1, 2] = -cam.fy * Yv[:, 1] / (z * z)
                jb = np.concatenate(
                    [dpi, -np.einsum("mci,mij->mcj", dpi, _skew_batch(Yv))], axis=2
                )
                dpiR = np.einsum("mci,ij->mcj", dpi, t_rel.R)
                ja = -np.concatenate(
                    [dpiR, -np.einsum("mci,mij->mcj", dpiR, _skew_batch(Xv))], axis=2
                )
                blocks = []
                if src > 0:
                    blocks.append((src - 1, ja))
                if dst > 0:
                    blocks.append((dst - 1, jb))
                for bi, Ji in blocks:
                    g[6 * bi : 6 * bi + 6] += np.einsum("m,mci,mc->i", wt, Ji, rv)
                    for bj, Jj in blocks:
                        H[6 * bi : 6 * bi + 6, 6 * bj : 6 * bj + 6] += np.einsum(
                            "m,mci,mcj->ij", wt, Ji, Jj
                        )
        stepped = False
        for _attempt in range(5):
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-9))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = list(poses)
            for s in range(1, len(nodes)):
                cand[s] = poses[s].perturbed(delta[6 * (s - 1) : 6 * s])
            cand_cost = _window_cost(cam, cand, window_edges, huber_px)
            if cand_cost < cost:
                poses = cand
                cost = cand_cost
                lam = max(lam / 3.0, 1e-9)
                stepped = True
                improved = True
                break
            lam *= 10.0
        if not stepped:
            break

    for node, pose in zip(nodes, poses):
        node.pose = pose
    return graph, cost, improved


def back_project(
    frame: FrameObservation,
    pose: RigidTransform,
    cam: Camera,
    min_conf: float = 0.2,
    integrated: Optional[np.ndarray] = None,
) -> PointCloud:
    """Lift the frame's depth estimate into a world-space point cloud.

    Prefers the inverse-depth map (world = pose^-1 unproject(u, 1/inv_depth));
    falls back to the pointmap. Pixels below the confidence floor are skipped.
    """
    h, w = frame.shape
    conf = frame.confidence if frame.confidence is not None else np.ones((h, w))
    cam_posed = cam.with_pose(pose)

    if frame.inv_depth is not None:
        valid = (frame.inv_depth > 0.0) & (conf >= min_conf)
        if not valid.any():
            return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), None, np.zeros((0, 2), np.int64))
        ys, xs = np.nonzero(valid)
        xy = np.stack([xs + 0.5, ys + 0.5], axis=1).astype(np.float64)
        z = 1.0 / frame.inv_depth[valid]
        points = cam_posed.unproject_pixels(xy, z)
    elif frame.pointmap is not None:
        valid = np.all(np.isfinite(frame.pointmap), axis=-1) & (conf >= min_conf)
        if not valid.any():
            return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), None, np.zeros((0, 2), np.int64))
        ys, xs = np.nonzero(valid)
        points = pose.inverse().apply(frame.pointmap[valid])
    else:
        raise NoGeometrySource(f"frame {frame.index} carries no depth source")

    colors = frame.rgb[ys, xs]
    feats = integrated[ys, xs] if integrated is not None else None
    pixels = np.stack([ys, xs], axis=1).astype(np.int64)
    return PointCloud(points, colors, feats, pixels)
