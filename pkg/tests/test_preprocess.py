import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmas.camera import make_rig
from cmas.errors import NormalizationError
from cmas.preprocess import (RawPoseTrack, filter_low_confidence, frame_jumps,
                             gaussian_smooth, load_alphapose_track, load_joint_map,
                             normalize, pose2d_from_jsonl, pose2d_to_jsonl,
                             segment_discontinuities)
from cmas.skeleton import Pose2DSequence, default_topology


def track(coords, conf=None, mask=None):
    return RawPoseTrack(coords=np.asarray(coords, float), confidence=conf, mask=mask)


class TestConfidenceFilter:
    def test_strictly_below_semantics(self):
        conf = np.array([[0.29, 0.30, 0.31]])
        t = track(np.zeros((1, 3, 2)), conf=conf)
        out = filter_low_confidence(t, 0.3)
        np.testing.assert_array_equal(out.mask[0], [False, True, True])

    def test_full_confidence_is_identity(self):
        t = track(np.ones((4, 2, 2)), conf=np.ones((4, 2)))
        out = filter_low_confidence(t)
        np.testing.assert_array_equal(out.coords, t.coords)
        assert out.mask.all()

    def test_alternating_half_masked(self):
        conf = np.tile([0.1, 0.9], (3, 2))  # (3, 4)
        t = track(np.zeros((3, 4, 2)), conf=conf)
        out = filter_low_confidence(t)
        assert out.mask.sum() == out.mask.size // 2

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        t = track(rng.standard_normal((5, 3, 2)), conf=rng.random((5, 3)))
        once = filter_low_confidence(t)
        twice = filter_low_confidence(once)
        np.testing.assert_array_equal(once.mask, twice.mask)
        np.testing.assert_array_equal(once.coords, twice.coords)

    def test_coordinates_retained(self):
        t = track(np.full((1, 1, 2), 3.3), conf=np.zeros((1, 1)))
        out = filter_low_confidence(t)
        assert not out.mask.any()
        np.testing.assert_array_equal(out.coords, t.coords)


class TestSegmentation:
    def test_constant_track_single_segment(self):
        segs = segment_discontinuities(track(np.ones((7, 2, 2))))
        assert len(segs) == 1
        assert segs[0].frames == 7

    def test_single_jump_splits_before_violating_frame(self):
        coords = np.zeros((10, 2, 2))
        coords[6:] += 0.6
        segs = segment_discontinuities(track(coords), 0.5)
        assert [(s.meta["start"], s.frames) for s in segs] == [(0, 6), (6, 4)]

    def test_two_jumps_three_segments(self):
        coords = np.zeros((12, 1, 2))
        coords[4:] += 0.7
        coords[8:] += 0.7
        segs = segment_discontinuities(track(coords), 0.5)
        assert [(s.meta["start"], s.frames) for s in segs] == [(0, 4), (4, 4), (8, 4)]

    def test_threshold_is_strict(self):
        coords = np.zeros((4, 1, 2))
        coords[2:, 0, 0] = 0.5  # jump exactly at threshold: not a cut
        segs = segment_discontinuities(track(coords), 0.5)
        assert len(segs) == 1

    def test_singleton_segments_discarded(self):
        coords = np.zeros((5, 1, 2))
        coords[1] = 10.0  # isolated frame produces two cuts around it
        coords[2:] = 20.0
        segs = segment_discontinuities(track(coords), 0.5)
        starts = [s.meta["start"] for s in segs]
        assert 1 not in starts
        assert all(s.frames >= 2 for s in segs)

    def test_rms_norm_over_joints(self):
        # per-joint jumps (0.8, 0): RMS over joints = sqrt(0.32) ~ 0.566 > 0.5
        coords = np.zeros((2, 2, 2))
        coords[1, 0, 0] = 0.8
        assert frame_jumps(track(coords))[0] == pytest.approx(np.sqrt(0.32))
        # the cut splits a 2-frame track into two singletons, both discarded
        assert segment_discontinuities(track(coords), 0.5) == []

    def test_cut_positions_exactly_at_violations(self):
        rng = np.random.default_rng(1)
        coords = np.cumsum(0.05 * rng.standard_normal((30, 3, 2)), axis=0)
        coords[11:] += 0.9
        coords[23:] -= 1.1
        t = track(coords)
        jumps = frame_jumps(t)
        segs = segment_discontinuities(t, 0.5)
        cut_frames = set(np.nonzero(jumps > 0.5)[0] + 1)
        starts = {s.meta["start"] for s in segs}
        assert cut_frames <= starts | {0}
        # concatenating segments (minus dropped singletons) reproduces the frames
        recovered = np.concatenate([s.coords for s in segs])
        kept = sum(s.frames for s in segs)
        assert kept <= 30
        if kept == 30:
            np.testing.assert_array_equal(recovered, coords)

    def test_masked_joints_excluded_from_norm(self):
        coords = np.zeros((2, 2, 2))
        coords[1, 0, 0] = 5.0  # huge jump on a masked joint
        mask = np.ones((2, 2), bool)
        mask[:, 0] = False
        assert frame_jumps(track(coords, mask=mask))[0] == 0.0


class TestGaussianSmooth:
    def test_constant_unchanged(self):
        t = track(np.full((9, 2, 2), 1.7))
        out = gaussian_smooth(t, 1.5)
        np.testing.assert_allclose(out.coords, 1.7, atol=1e-12)

    def test_impulse_kernel_arithmetic(self):
        coords = np.zeros((11, 1, 2))
        coords[5, 0, 0] = 2.0
        out = gaussian_smooth(track(coords), 1.0)
        k = np.exp(-0.5 * np.arange(-3, 4) ** 2)
        assert out.coords[5, 0, 0] == pytest.approx(2.0 * k[3] / k.sum())
        assert out.coords[4, 0, 0] == pytest.approx(2.0 * k[2] / k.sum())
        assert out.coords[4, 0, 0] == pytest.approx(out.coords[6, 0, 0])

    def test_sigma_zero_identity(self):
        rng = np.random.default_rng(2)
        t = track(rng.standard_normal((6, 2, 2)))
        out = gaussian_smooth(t, 0.0)
        np.testing.assert_array_equal(out.coords, t.coords)

    def test_interior_frames_have_unit_influence(self):
        # adding delta to a frame >= 2*radius from both ends shifts the output sum by delta
        rng = np.random.default_rng(3)
        base = track(rng.standard_normal((20, 1, 2)))
        pert = base.coords.copy()
        pert[9, 0, 0] += 1.0
        s0 = gaussian_smooth(base, 1.0).coords.sum(axis=0)
        s1 = gaussian_smooth(track(pert), 1.0).coords.sum(axis=0)
        assert (s1 - s0)[0, 0] == pytest.approx(1.0, abs=1e-9)

    def test_masked_frame_filled_from_neighbors(self):
        coords = np.zeros((5, 1, 2))
        coords[2] = 99.0  # garbage under the mask
        mask = np.ones((5, 1), bool)
        mask[2] = False
        out = gaussian_smooth(track(coords, mask=mask), 1.0)
        assert out.mask[2, 0]
        assert out.coords[2, 0, 0] == pytest.approx(0.0)

    def test_fully_masked_joint_stays_masked(self):
        coords = np.zeros((5, 2, 2))
        mask = np.ones((5, 2), bool)
        mask[:, 1] = False
        out = gaussian_smooth(track(coords, mask=mask), 1.0)
        assert not out.mask[:, 1].any()
        assert out.mask[:, 0].all()

    @given(st.floats(min_value=0.2, max_value=3.0), st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_smoothing_is_averaging(self, sigma, seed):
        rng = np.random.default_rng(seed)
        coords = rng.uniform(-1, 1, size=(12, 1, 2))
        out = gaussian_smooth(track(coords), sigma)
        assert out.coords.min() >= coords.min() - 1e-12
        assert out.coords.max() <= coords.max() + 1e-12


class TestNormalize:
    def setup_method(self):
        self.topo = default_topology()
        self.view = make_rig(7).reference_view

    def canonical_track(self, rng):
        coords = rng.standard_normal((6, 13, 2)) * 0.1
        coords[:, 0] = 0.0
        coords[:, 1] = [0.0, 0.55]  # torso length equals the canonical projection
        return track(coords)

    def test_canonical_track_identity(self):
        t = self.canonical_track(np.random.default_rng(4))
        seq, xf = normalize(t, self.view, self.topo)
        assert xf.scale == pytest.approx(1.0)
        np.testing.assert_allclose(xf.offset, 0.0, atol=1e-12)
        np.testing.assert_allclose(seq.data, t.coords)

    def test_recovers_synthetic_scale_and_offset(self):
        rng = np.random.default_rng(5)
        base = self.canonical_track(rng)
        warped = track(2.0 * base.coords + np.array([3.0, -1.0]))
        seq, xf = normalize(warped, self.view, self.topo)
        assert xf.scale == pytest.approx(0.5, rel=1e-9)
        np.testing.assert_allclose(seq.data, base.coords, atol=1e-9)

    def test_round_trip(self):
        rng = np.random.default_rng(6)
        t = self.canonical_track(rng)
        _, xf = normalize(t, self.view, self.topo)
        np.testing.assert_allclose(xf.invert(xf.apply(t.coords)), t.coords, atol=1e-9)

    def test_degenerate_torso_rejected(self):
        t = track(np.zeros((3, 13, 2)))
        with pytest.raises(NormalizationError):
            normalize(t, self.view, self.topo)


class TestFileFormats:
    def test_alphapose_round_trip(self, tmp_path):
        frames = [{"keypoints": [1.0, 2.0, 0.9, 3.0, 4.0, 0.2, 5.0, 6.0, 0.7]}
                  for _ in range(2)]
        src = tmp_path / "raw.json"
        src.write_text(json.dumps(frames))
        mapping = tmp_path / "map.json"
        mapping.write_text(json.dumps({"map": [2, 0]}))
        t = load_alphapose_track(src, load_joint_map(mapping))
        assert t.coords.shape == (2, 2, 2)
        np.testing.assert_array_equal(t.coords[0], [[5.0, 6.0], [1.0, 2.0]])
        np.testing.assert_array_equal(t.confidence[0], [0.7, 0.9])

    def test_jsonl_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        mask = rng.random((4, 3)) > 0.3
        data = rng.standard_normal((4, 3, 2))
        data[~mask] = 0.0
        seq = Pose2DSequence(data=data, mask=mask)
        path = tmp_path / "seq.jsonl"
        pose2d_to_jsonl(seq, path)
        rec = json.loads(path.read_text().splitlines()[0])
        assert set(rec) == {"f", "xy", "mask"}
        again = pose2d_from_jsonl(path)
        np.testing.assert_array_equal(again.data, seq.data)
        np.testing.assert_array_equal(again.observed_mask(), mask)
