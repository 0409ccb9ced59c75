import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamsplat.core import (
    Camera,
    EngineConfig,
    FeatureGaussian,
    FrameObservation,
    GaussianArrays,
    RigidTransform,
    covariance,
    eval_density,
    quat_normalize,
    quat_to_matrix,
    rotvec_to_matrix,
)
from streamsplat.errors import DimMismatch, SingularCovariance


def make_gaussian(quat=(1, 0, 0, 0), scale=(0.0, 0.0, 0.0), mu=(0, 0, 0)):
    return FeatureGaussian(
        mu=np.array(mu, dtype=float),
        scale=np.array(scale, dtype=float),
        quat=np.array(quat, dtype=float),
        opacity_logit=0.0,
        color=np.array([0.5, 0.5, 0.5]),
        feat=np.array([1.0, 0.0]),
    )


class TestCovariance:
    def test_identity_case(self):
        g = make_gaussian()
        assert np.allclose(covariance(g), np.eye(3), atol=1e-15)

    def test_axis_aligned_scaling(self):
        g = make_gaussian(scale=(math.log(2.0), 0.0, 0.0))
        assert np.allclose(covariance(g), np.diag([4.0, 1.0, 1.0]), atol=1e-14)

    def test_eigenvalues_match_scales(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            q = rng.standard_normal(4)
            s = rng.uniform(-2.0, 0.5, 3)
            g = make_gaussian(quat=q, scale=s)
            eig = np.sort(np.linalg.eigvalsh(covariance(g)))
            assert np.allclose(eig, np.sort(np.exp(2.0 * s)), rtol=1e-10)

    def test_symmetric_psd(self):
        rng = np.random.default_rng(5)
        g = make_gaussian(quat=rng.standard_normal(4), scale=rng.uniform(-1, 1, 3))
        cov = covariance(g)
        assert np.allclose(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() > 0

    def test_quaternion_sign_flip_invariance(self):
        rng = np.random.default_rng(7)
        q = rng.standard_normal(4)
        s = rng.uniform(-1, 0, 3)
        a = covariance(make_gaussian(quat=q, scale=s))
        b = covariance(make_gaussian(quat=-q, scale=s))
        assert np.array_equal(a, b)


class TestEvalDensity:
    def test_peak_is_one(self):
        g = make_gaussian(mu=(0.3, -0.2, 1.0))
        assert eval_density(g, g.mu) == pytest.approx(1.0)

    def test_isotropic_unit_distance(self):
        g = make_gaussian()
        val = eval_density(g, np.array([1.0, 0.0, 0.0]))
        assert val == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_matches_dense_solve_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            g = make_gaussian(
                quat=rng.standard_normal(4),
                scale=rng.uniform(-1.5, 0.5, 3),
                mu=rng.standard_normal(3),
            )
            x = rng.standard_normal(3)
            d = x - g.mu
            cov = covariance(g)
            expected = math.exp(-0.5 * float(d @ np.linalg.inv(cov) @ d))
            assert eval_density(g, x) == pytest.approx(expected, abs=1e-12)

    def test_joint_rotation_invariance(self):
        rng = np.random.default_rng(17)
        g = make_gaussian(quat=rng.standard_normal(4), scale=rng.uniform(-1, 0, 3))
        x = rng.standard_normal(3)
        R = rotvec_to_matrix(rng.standard_normal(3))
        # rotate both the offset and the Gaussian's orientation
        q_rot = np.empty(4)
        w, v = g.quat[0], g.quat[1:]
        Rq = quat_to_matrix(g.quat)
        g2 = FeatureGaussian(
            mu=g.mu,
            scale=g.scale,
            quat=_matrix_to_quat(R @ Rq),
            opacity_logit=0.0,
            color=g.color,
            feat=g.feat,
        )
        x2 = g.mu + R @ (x - g.mu)
        assert eval_density(g2, x2) == pytest.approx(eval_density(g, x), rel=1e-10)

    def test_singular_covariance_raises(self):
        g = make_gaussian(scale=(-800.0, 0.0, 0.0))
        with pytest.raises(SingularCovariance):
            eval_density(g, np.array([1.0, 0.0, 0.0]))


def _matrix_to_quat(R):
    from streamsplat.pipeline import rotvec_quat_cache

    return rotvec_quat_cache(R)


class TestTypes:
    def test_feature_gaussian_normalizes(self):
        g = FeatureGaussian(
            mu=np.zeros(3),
            scale=np.zeros(3),
            quat=np.array([2.0, 0.0, 0.0, 0.0]),
            opacity_logit=0.0,
            color=np.zeros(3),
            feat=np.array([3.0, 4.0]),
        )
        assert np.allclose(np.linalg.norm(g.quat), 1.0)
        assert np.allclose(np.linalg.norm(g.feat), 1.0)
        assert g.opacity == pytest.approx(0.5)

    def test_camera_validation(self):
        with pytest.raises(ValueError):
            Camera(fx=-1.0, fy=1.0, cx=0, cy=0, width=8, height=8)
        bad = RigidTransform(np.eye(3) * 2.0, np.zeros(3))
        with pytest.raises(ValueError):
            Camera(fx=1.0, fy=1.0, cx=0, cy=0, width=8, height=8, pose=bad)

    def test_frame_validation(self):
        frame = FrameObservation(
            index=0,
            rgb=np.zeros((4, 4, 3)),
            feature_map=np.zeros((5, 4, 2)),
        )
        with pytest.raises(DimMismatch):
            frame.validate()

    def test_config_threshold_domains(self):
        with pytest.raises(ValueError):
            EngineConfig(theta_cache=1.5)
        with pytest.raises(ValueError):
            EngineConfig(motion_steps=0)

    def test_config_from_mapping(self):
        cfg = EngineConfig.from_mapping({"lambda1": "0.5", "motion_steps": "7"})
        assert cfg.lambda1 == 0.5 and cfg.motion_steps == 7
        with pytest.raises(KeyError):
            EngineConfig.from_mapping({"nope": "1"})


class TestRigidTransform:
    def test_compose_inverse_roundtrip(self):
        rng = np.random.default_rng(3)
        a = RigidTransform(rotvec_to_matrix(rng.standard_normal(3)), rng.standard_normal(3))
        x = rng.standard_normal((5, 3))
        assert np.allclose(a.inverse().apply(a.apply(x)), x, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_exp_is_rigid(self, seed):
        rng = np.random.default_rng(seed)
        xi = rng.uniform(-1.0, 1.0, 6)
        T = RigidTransform.exp(xi)
        R = T.R
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-10)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)


class TestGaussianArrays:
    def test_list_roundtrip(self):
        rng = np.random.default_rng(1)
        gs = [
            FeatureGaussian(
                mu=rng.standard_normal(3),
                scale=rng.standard_normal(3),
                quat=quat_normalize(rng.standard_normal(4)),
                opacity_logit=float(rng.standard_normal()),
                color=rng.uniform(0, 1, 3),
                feat=rng.standard_normal(5),
                sem_id=int(rng.integers(0, 3)),
            )
            for _ in range(4)
        ]
        arrays = GaussianArrays.from_list(gs)
        back = arrays.to_list()
        for a, b in zip(gs, back):
            assert np.array_equal(a.mu, b.mu)
            assert np.array_equal(a.feat, b.feat)
            assert a.sem_id == b.sem_id
