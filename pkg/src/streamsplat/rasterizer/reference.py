"""Per-pixel scalar-loop reference renderer.

Deliberately naive: no tiles, no binning, every valid Gaussian is visited
at every pixel in depth order. Shares only the projection stage with the
production path; the compositing loop, conic inversion and termination
logic are written out independently so this can serve as the oracle for
the tiled renderer. Within double precision the two must agree
bit-identically.
"""

from __future__ import annotations

import math

import numpy as np

from ..core import Camera, as_arrays, sigmoid
from .projection import project_batch


def render_reference(gaussians, cam: Camera, near: float = 0.01):
    """Returns (rgb, depth, feature, alpha) images."""
    arrays = as_arrays(gaussians)
    h, w = cam.height, cam.width
    fdim = arrays.feat_dim

    st = project_batch(arrays, cam, near)
    cand = np.nonzero(st.valid)[0]
    order = cand[np.argsort(st.depth[cand], kind="stable")]

    alpha = sigmoid(arrays.opacity_logit)
    color = arrays.color
    feat = arrays.feat
    depth = st.depth
    mean2d = st.mean2d

    conic = np.empty((len(arrays), 3))
    for i in range(len(arrays)):
        A = st.cov2d[i, 0, 0]
        B = st.cov2d[i, 0, 1]
        C = st.cov2d[i, 1, 1]
        det = A * C - B * B
        conic[i, 0] = C / det
        conic[i, 1] = -B / det
        conic[i, 2] = A / det

    out_rgb = np.zeros((h, w, 3))
    out_feat = np.zeros((h, w, fdim))
    out_alpha = np.zeros((h, w))
    out_depth = np.full((h, w), -1.0)

    for py in range(h):
        pcy = py + 0.5
        for px in range(w):
            pcx = px + 0.5
            T = 1.0
            accz = 0.0
            accw = 0.0
            for i in order:
                dx = pcx - mean2d[i, 0]
                dy = pcy - mean2d[i, 1]
                m = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                if m > 9.0:
                    continue
                ahat = alpha[i] * math.exp(-0.5 * m)
                wgt = ahat * T
                for c in range(3):
                    out_rgb[py, px, c] += wgt * color[i, c]
                for c in range(fdim):
                    out_feat[py, px, c] += wgt * feat[i, c]
                accz += wgt * depth[i]
                out_alpha[py, px] += wgt
                T *= 1.0 - ahat
                if T < 1e-4:
                    break
            if out_alpha[py, px] > 0.0:
                out_depth[py, px] = accz / out_alpha[py, px]

    return out_rgb, out_depth, out_feat, out_alpha
