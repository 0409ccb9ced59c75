import math

import numpy as np
import pytest

from streamsplat.core import Camera, GaussianArrays, RigidTransform, logit


def random_arrays(rng, n, feat_dim=4, z_offset=3.0, spread=1.0, opacity=(0.2, 0.8)):
    """Random Gaussians in front of the default camera, normalized fields."""
    arrays = GaussianArrays(
        mu=rng.uniform(-spread, spread, (n, 3)) + np.array([0.0, 0.0, z_offset]),
        scale=np.log(rng.uniform(0.08, 0.35, (n, 3))),
        quat=rng.standard_normal((n, 4)),
        opacity_logit=logit(rng.uniform(*opacity, n)),
        color=rng.uniform(0.0, 1.0, (n, 3)),
        feat=rng.standard_normal((n, feat_dim)),
    )
    arrays.quat /= np.linalg.norm(arrays.quat, axis=1, keepdims=True)
    arrays.feat /= np.linalg.norm(arrays.feat, axis=1, keepdims=True)
    return arrays


def small_camera(size=32, f=60.0, pose=None):
    return Camera(
        fx=f,
        fy=f,
        cx=size / 2.0,
        cy=size / 2.0,
        width=size,
        height=size,
        pose=pose or RigidTransform.identity(),
    )


@pytest.fixture(scope="session")
def mini_scene_dir(tmp_path_factory):
    """A small but complete synthetic SceneStream shared across tests."""
    from streamsplat.io.synth import SynthSpec, generate

    out = tmp_path_factory.mktemp("scene") / "mini"
    spec = SynthSpec(
        n_gaussians=120, n_classes=3, n_frames=12, width=48, height=48, seed=3
    )
    scene = generate(spec, str(out))
    return str(out), scene


def relative_gradient_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    """Max abs deviation relative to the gradient scale of the group.

    The floor keeps all-zero gradient groups (legitimately flat
    directions) from dividing round-off noise by itself.
    """
    scale = max(np.abs(fd).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - fd).max() / scale)
