import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmas.errors import ShapeError
from cmas.skeleton import (Pose2DSequence, Pose3DSequence, SkeletonTopology,
                           bone_lengths, bone_variance_gradient, bone_variance_loss,
                           default_topology, topology_from_json, topology_to_json)
from conftest import finite_difference_gradient, relative_gradient_error


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class TestTopology:
    def test_default_is_a_13_joint_tree(self, topo):
        assert topo.joint_count == 13
        assert topo.bone_count == 12
        assert topo.root_index == 0
        assert len(topo.names) == 13

    def test_rejects_self_bone(self):
        with pytest.raises(ValueError, match="itself"):
            SkeletonTopology(joint_count=3, bones=((0, 1), (2, 2)))

    def test_rejects_duplicate_bone(self):
        with pytest.raises(ValueError, match="duplicate"):
            SkeletonTopology(joint_count=3, bones=((0, 1), (1, 0)))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            SkeletonTopology(joint_count=3, bones=((0, 1), (1, 5)))

    def test_rejects_disconnected(self):
        # a 3-cycle over {0,1,2} leaves joint 3 unreachable
        with pytest.raises(ValueError, match="connected"):
            SkeletonTopology(joint_count=4, bones=((0, 1), (1, 2), (0, 2)))

    def test_rejects_wrong_bone_count(self):
        with pytest.raises(ValueError, match="tree"):
            SkeletonTopology(joint_count=4, bones=((0, 1), (1, 2)))

    def test_json_round_trip(self, topo, tmp_path):
        path = tmp_path / "topo.json"
        topology_to_json(topo, path)
        doc = json.loads(path.read_text())
        assert set(doc) == {"joints", "root", "bones", "names"}
        again = topology_from_json(path)
        assert again == topo


class TestPoseContainers:
    def test_pose3d_rejects_nonfinite(self):
        bad = np.zeros((2, 3, 3))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            Pose3DSequence(data=bad)

    def test_pose3d_rejects_bad_shape(self):
        with pytest.raises(ShapeError):
            Pose3DSequence(data=np.zeros((2, 3, 2)))

    def test_pose2d_confidence_range(self):
        with pytest.raises(ValueError):
            Pose2DSequence(data=np.zeros((2, 3, 2)), confidence=np.full((2, 3), 1.5))

    def test_pose2d_masked_nonfinite_allowed(self):
        data = np.zeros((2, 3, 2))
        data[0, 0] = np.nan
        mask = np.ones((2, 3), bool)
        mask[0, 0] = False
        seq = Pose2DSequence(data=data, mask=mask)
        assert seq.frames == 2
        with pytest.raises(ValueError):
            Pose2DSequence(data=data)


class TestBoneLengths:
    def test_three_four_five(self):
        topo = SkeletonTopology(joint_count=2, bones=((0, 1),))
        pose = np.array([[0.0, 0.0, 0.0], [0.0, 3.0, 4.0]])
        assert bone_lengths(pose, topo) == pytest.approx([5.0])

    def test_coincident_joints(self, topo):
        assert np.all(bone_lengths(np.zeros((13, 3)), topo) == 0.0)

    def test_rotation_invariance(self, topo):
        rng = np.random.default_rng(0)
        pose = rng.standard_normal((13, 3))
        rot = random_rotation(rng)
        np.testing.assert_allclose(bone_lengths(pose @ rot.T, topo),
                                   bone_lengths(pose, topo), atol=1e-12)

    def test_shape_mismatch(self, topo):
        with pytest.raises(ShapeError):
            bone_lengths(np.zeros((7, 3)), topo)


class TestBoneVarianceLoss:
    def test_rigid_translation_is_zero(self, topo):
        rng = np.random.default_rng(1)
        pose = rng.standard_normal((13, 3))
        seq = pose[None] + rng.standard_normal((6, 1, 3))
        assert bone_variance_loss(seq, topo) == pytest.approx(0.0, abs=1e-12)

    def test_single_frame_is_zero(self, topo):
        rng = np.random.default_rng(2)
        assert bone_variance_loss(rng.standard_normal((1, 13, 3)), topo) == 0.0

    def test_two_frame_example(self):
        # one bone with lengths [1, 3]: mean 2, population variance 1
        topo = SkeletonTopology(joint_count=2, bones=((0, 1),))
        seq = np.zeros((2, 2, 3))
        seq[0, 1, 0] = 1.0
        seq[1, 1, 0] = 3.0
        assert bone_variance_loss(seq, topo) == pytest.approx(1.0)

    def test_population_divisor(self):
        # lengths [0, 1] over L=2: population variance 0.25 (sample variance would be 0.5)
        topo = SkeletonTopology(joint_count=2, bones=((0, 1),))
        seq = np.zeros((2, 2, 3))
        seq[1, 1, 2] = 1.0
        assert bone_variance_loss(seq, topo) == pytest.approx(0.25)

    def test_global_rotation_invariance(self, topo):
        rng = np.random.default_rng(3)
        seq = rng.standard_normal((5, 13, 3))
        rot = random_rotation(rng)
        np.testing.assert_allclose(bone_variance_loss(seq @ rot.T, topo),
                                   bone_variance_loss(seq, topo), rtol=1e-10)

    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_nonnegative_and_zero_iff_constant(self, frames, seed):
        topo = SkeletonTopology(joint_count=3, bones=((0, 1), (1, 2)))
        rng = np.random.default_rng(seed)
        seq = rng.uniform(-1, 1, size=(frames, 3, 3))
        loss = bone_variance_loss(seq, topo)
        assert loss >= 0.0
        lengths = bone_lengths(seq, topo)
        if np.ptp(lengths, axis=0).max() <= 1e-12:
            assert loss <= 1e-12
        if loss <= 1e-12:
            assert np.ptp(lengths, axis=0).max() <= 1e-5


class TestBoneVarianceGradient:
    def test_rigid_sequence_zero_gradient(self, topo):
        rng = np.random.default_rng(4)
        pose = rng.standard_normal((13, 3))
        seq = pose[None] + rng.standard_normal((4, 1, 3))
        np.testing.assert_allclose(bone_variance_gradient(seq, topo), 0.0, atol=1e-12)

    def test_matches_finite_differences(self, tiny_topo):
        rng = np.random.default_rng(5)
        for _ in range(10):
            seq = rng.uniform(-1, 1, size=(3, 4, 3))
            grad = bone_variance_gradient(seq, tiny_topo)
            fd = finite_difference_gradient(lambda s: bone_variance_loss(s, tiny_topo), seq)
            assert relative_gradient_error(grad, fd) < 1e-4

    def test_translation_invariance(self, topo):
        rng = np.random.default_rng(6)
        seq = rng.standard_normal((4, 13, 3))
        shifted = seq + np.array([10.0, -3.0, 2.0])
        np.testing.assert_allclose(bone_variance_gradient(shifted, topo),
                                   bone_variance_gradient(seq, topo), atol=1e-9)

    def test_zero_length_bone_is_safe(self):
        topo = SkeletonTopology(joint_count=2, bones=((0, 1),))
        seq = np.zeros((3, 2, 3))
        seq[2, 1, 0] = 1.0  # bone lengths [0, 0, 1]
        grad = bone_variance_gradient(seq, topo)
        assert np.all(np.isfinite(grad))
