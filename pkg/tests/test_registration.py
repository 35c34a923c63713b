"""Rigid transforms, similarity metrics, and registration recovery."""

import numpy as np
import pytest

from cranioforge import (
    NoOverlapError,
    RegistrationConfig,
    RigidTransform,
    UndefinedVarianceError,
    compose,
    invert,
    register_rigid,
    resample,
    similarity,
)
from conftest import make_volume


def center_form_params(transform: RigidTransform, center: np.ndarray):
    """(angles, translation) of a transform re-expressed about ``center``."""
    rot = transform.matrix[:3, :3]
    t_center = transform.matrix[:3, 3] - (center - rot @ center)
    return np.array(transform.rotation), t_center


class TestRigidTransform:
    def test_identity_matrix(self):
        t = RigidTransform.identity()
        assert np.array_equal(t.matrix, np.eye(4))

    def test_compose_with_identity(self):
        t = RigidTransform(rotation=(10, -4, 25), translation=(1, 2, 3))
        assert np.allclose(compose(RigidTransform.identity(), t).matrix, t.matrix)
        assert np.allclose(compose(t, RigidTransform.identity()).matrix, t.matrix)

    def test_double_inverse(self):
        t = RigidTransform(rotation=(33, 12, -7), translation=(4, -5, 6))
        assert np.allclose(invert(invert(t)).matrix, t.matrix, atol=1e-12)

    def test_compose_inverse_is_identity(self):
        t = RigidTransform(rotation=(-20, 5, 140), translation=(10, 0, -3))
        assert np.max(np.abs(compose(t, invert(t)).matrix - np.eye(4))) < 1e-9
        assert np.max(np.abs(compose(invert(t), t).matrix - np.eye(4))) < 1e-9

    def test_orthonormality_enforced(self):
        bad = np.eye(4)
        bad[0, 1] = 0.01
        with pytest.raises(ValueError):
            RigidTransform.from_matrix(bad)

    def test_reflection_rejected(self):
        bad = np.diag([-1.0, 1.0, 1.0, 1.0])
        with pytest.raises(ValueError):
            RigidTransform.from_matrix(bad)

    def test_euler_round_trip(self):
        for angles in [(5, -3, 11), (0, 0, 90), (-45, 30, 120), (10, 85, -20)]:
            t = RigidTransform(rotation=angles, translation=(0, 0, 0))
            t2 = RigidTransform.from_matrix(t.matrix)
            assert np.allclose(t2.matrix, t.matrix, atol=1e-12)

    def test_rotation_about_center_fixes_center(self):
        center = np.array([10.0, -4.0, 7.0])
        t = RigidTransform.about_center((15, -25, 40), (0, 0, 0), center)
        moved = t.matrix[:3, :3] @ center + t.matrix[:3, 3]
        assert np.allclose(moved, center, atol=1e-12)


class TestSimilarity:
    def test_ncc_self_is_one(self):
        rng = np.random.default_rng(3)
        v = make_volume(rng.normal(size=(10, 10, 10)))
        assert similarity(v, v, "ncc") == pytest.approx(1.0, abs=1e-9)

    def test_ncc_negation_is_minus_one(self):
        rng = np.random.default_rng(4)
        data = rng.normal(size=(10, 10, 10))
        v = make_volume(data)
        neg = make_volume(-data)
        assert similarity(v, neg, "ncc") == pytest.approx(-1.0, abs=1e-9)

    def test_ncc_constant_volume_raises(self):
        v = make_volume(np.ones((4, 4, 4)))
        w = make_volume(np.random.default_rng(5).normal(size=(4, 4, 4)))
        with pytest.raises(UndefinedVarianceError):
            similarity(v, w, "ncc")

    def test_nmi_independent_below_self(self):
        rng = np.random.default_rng(6)
        a = make_volume(rng.uniform(size=(32, 32, 32)))
        b = make_volume(rng.uniform(size=(32, 32, 32)))
        cross = similarity(a, b, "nmi")
        assert cross < similarity(a, a, "nmi")
        assert cross < similarity(b, b, "nmi")

    def test_nmi_constant_volume_analytic(self):
        const = make_volume(np.full((6, 6, 6), 3.0))
        varied = make_volume(np.random.default_rng(7).normal(size=(6, 6, 6)))
        # single-bin marginal: H(A)=0 and H(A,B)=H(B), so nmi is exactly 1
        assert similarity(const, varied, "nmi") == pytest.approx(1.0, abs=1e-12)
        assert similarity(const, const, "nmi") == pytest.approx(2.0)

    def test_metric_symmetry(self):
        rng = np.random.default_rng(8)
        a = make_volume(rng.normal(size=(12, 12, 12)))
        b = make_volume(rng.normal(size=(12, 12, 12)))
        assert similarity(a, b, "ncc") == similarity(b, a, "ncc")
        assert similarity(a, b, "nmi") == pytest.approx(similarity(b, a, "nmi"), abs=1e-12)

    def test_grid_mismatch_rejected(self):
        a = make_volume(np.zeros((4, 4, 4)))
        b = make_volume(np.zeros((4, 4, 5)))
        with pytest.raises(ValueError):
            similarity(a, b, "ncc")


class TestMonotoneSelfSimilarity:
    def test_perturbation_lowers_similarity(self, phantom):
        rng = np.random.default_rng(9)
        for metric in ("nmi", "ncc"):
            base = similarity(phantom, phantom, metric)
            for _ in range(3):
                angles = rng.uniform(-8, 8, 3)
                shift = rng.uniform(1.0, 4.0, 3) * rng.choice([-1, 1], 3)
                t = RigidTransform.about_center(angles, shift, phantom.world_center())
                moved = resample(phantom, phantom, t)
                assert similarity(phantom, moved, metric) < base


class TestRegisterRigid:
    def test_self_registration_near_identity(self, phantom):
        result = register_rigid(phantom, phantom)
        assert result.converged
        assert np.max(np.abs(result.transform.rotation)) < 0.1
        assert np.max(np.abs(result.transform.translation)) < 0.1

    def test_translation_recovery(self, phantom):
        center = phantom.world_center()
        t_true = RigidTransform.about_center((0, 0, 0), (3.0, -2.0, 1.5), center)
        moved = resample(phantom, phantom, invert(t_true))
        result = register_rigid(moved, phantom)
        _, t_rec = center_form_params(result.transform, center)
        assert np.max(np.abs(t_rec - [3.0, -2.0, 1.5])) < 0.5

    def test_rotation_recovery(self, phantom):
        center = phantom.world_center()
        t_true = RigidTransform.about_center((0, 0, 5.0), (0, 0, 0), center)
        moved = resample(phantom, phantom, invert(t_true))
        result = register_rigid(moved, phantom)
        angles, _ = center_form_params(result.transform, center)
        assert abs(angles[2] - 5.0) < 0.5
        assert np.max(np.abs(angles[:2])) < 0.5

    def test_deterministic(self, phantom):
        center = phantom.world_center()
        t_true = RigidTransform.about_center((2, -1, 3), (1.0, 2.0, -1.0), center)
        moved = resample(phantom, phantom, invert(t_true))
        r1 = register_rigid(moved, phantom)
        r2 = register_rigid(moved, phantom)
        assert np.array_equal(r1.transform.matrix, r2.transform.matrix)
        assert r1.score == r2.score

    def test_no_overlap_raises(self):
        a = make_volume(np.ones((8, 8, 8)))
        far = np.eye(4)
        far[:3, 3] = [1000.0, 0.0, 0.0]
        b = make_volume(np.ones((8, 8, 8)), affine=far)
        with pytest.raises(NoOverlapError):
            register_rigid(a, b)

    def test_unconverged_flag(self, phantom):
        config = RegistrationConfig(max_iterations=2, tolerance=1e-12)
        result = register_rigid(phantom, phantom, config)
        assert not result.converged

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RegistrationConfig(metric="ssd")
        with pytest.raises(ValueError):
            RegistrationConfig(histogram_bins=4)
        with pytest.raises(ValueError):
            RegistrationConfig(pyramid_levels=0)
        assert RegistrationConfig().downsample_factors == (4, 2, 1)
        assert RegistrationConfig().smoothing_sigma_voxels == (2.0, 1.0, 0.0)
