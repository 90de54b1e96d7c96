import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from signseg import skeleton as sk
from signseg.skeleton import B, I, O, P, PoseSequence

MANY = settings(max_examples=1000, deadline=None)

coords = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


def pose_arrays(joints=sk.BODY_JOINTS, max_t=12):
    return hnp.arrays(np.float64, st.tuples(st.integers(1, max_t), st.just(joints), st.just(2)), elements=coords)


class TestGraphs:
    def test_body_graph_size(self):
        g = sk.build_body_graph()
        assert g.joint_count == 27
        assert g.adjacency.sum() / 2 == len(g.edges)

    def test_graphs_connected(self):
        for g in (sk.build_body_graph(), sk.build_hand_graph()):
            reach = np.linalg.matrix_power(g.adjacency + np.eye(g.joint_count), g.joint_count)
            assert np.all(reach > 0)

    def test_a_hat_symmetric_normalized(self):
        a = sk.build_body_graph().a_hat
        assert np.array_equal(a, a.T)
        # spectral radius of D^-1/2 (A+I) D^-1/2 is 1
        assert np.max(np.abs(np.linalg.eigvalsh(a))) == pytest.approx(1.0)

    def test_mirror_is_involution_preserving_edges(self):
        g = sk.build_body_graph()
        m = np.array(g.mirror)
        assert np.array_equal(m[m], np.arange(27))
        assert np.array_equal(g.adjacency[np.ix_(m, m)], g.adjacency)

    def test_hand_graph_is_tree(self):
        g = sk.build_hand_graph()
        assert g.joint_count == 21 and len(g.edges) == 20

    def test_unknown_joint_count(self):
        with pytest.raises(sk.SchemaError):
            sk.graph_for(13)


class TestLabels:
    def test_string_round_trip(self):
        assert list(sk.labels_from_string("BIIO")) == [3, 2, 2, 1]
        assert sk.labels_to_string([B, I, I, O]) == "BIIO"

    def test_bad_character(self):
        with pytest.raises(sk.PoseFormatError):
            sk.labels_from_string("BXO")


class TestNormalize:
    @MANY
    @given(pose_arrays())
    def test_within_unit_box(self, frames):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sk.DegeneratePoseWarning)
            out = sk.normalize_coords(PoseSequence(frames)).frames
        assert np.all(out >= -1.0) and np.all(out <= 1.0)

    def test_longer_axis_spans_full_range(self):
        rng = np.random.default_rng(0)
        out = sk.normalize_coords(PoseSequence(rng.normal(size=(10, 27, 2)) * [3.0, 1.0])).frames
        assert out[..., 0].min() == pytest.approx(-1) and out[..., 0].max() == pytest.approx(1)

    def test_degenerate_warns_and_zeroes(self):
        with pytest.warns(sk.DegeneratePoseWarning):
            out = sk.normalize_coords(PoseSequence(np.full((3, 27, 2), 5.0)))
        assert np.all(out.frames == 0)

    @MANY
    @given(pose_arrays())
    def test_flip_involution(self, frames):
        p = PoseSequence(frames)
        assert np.array_equal(sk.horizontal_flip(sk.horizontal_flip(p)).frames, frames)

    @MANY
    @given(pose_arrays())
    def test_flip_commutes_with_normalize(self, frames):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sk.DegeneratePoseWarning)
            p = PoseSequence(frames)
            a = sk.normalize_coords(sk.horizontal_flip(p)).frames
            b = sk.horizontal_flip(sk.normalize_coords(p)).frames
        assert np.max(np.abs(a - b), initial=0.0) <= 1e-12

    def test_flip_swaps_hands(self):
        frames = np.zeros((1, 27, 2))
        frames[0, 17:27, 0] = 5.0
        out = sk.horizontal_flip(PoseSequence(frames)).frames
        assert np.all(out[0, 7:17, 0] == -5.0) and np.all(out[0, 17:27, 0] == 0.0)

    def test_hand_frames_normalized_per_frame(self):
        rng = np.random.default_rng(1)
        h = rng.normal(size=(5, 21, 2)) * np.arange(1, 6)[:, None, None]
        out = sk.normalize_hand_frames(h)
        assert np.allclose(np.abs(out).reshape(5, -1).max(axis=1), 1.0)


class TestKinematics:
    @MANY
    @given(pose_arrays(max_t=20))
    def test_velocity_integrates_back(self, frames):
        f = sk.compute_kinematics(PoseSequence(frames))
        x, vx = f.features[0], f.features[2]
        rebuilt = x[0] + np.cumsum(vx, axis=0)
        # the backward difference telescopes exactly when summed in order
        acc = x[0].copy()
        for t in range(1, len(x)):
            acc = acc + vx[t]
            assert np.allclose(acc, x[t], rtol=0, atol=1e-9 * max(1.0, np.abs(frames).max()))
        assert rebuilt.shape == x.shape

    def test_first_frame_zero(self):
        f = sk.compute_kinematics(PoseSequence(np.random.default_rng(2).normal(size=(4, 27, 2))))
        assert np.all(f.features[2:, 0] == 0)

    def test_constant_velocity_has_zero_acceleration(self):
        t = np.arange(6, dtype=float)[:, None, None]
        frames = np.broadcast_to(t * np.array([1.0, -2.0]), (6, 27, 2)).copy()
        f = sk.compute_kinematics(PoseSequence(frames))
        assert np.allclose(f.features[4:, 2:], 0.0)


class TestPadding:
    @MANY
    @given(st.integers(1, 40), st.integers(0, 30), st.integers(0, 2 ** 32 - 1))
    def test_labels_and_mask_agree(self, t, extra, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(1, 4, size=t)
        f, lab = sk.pad_to_length(sk.compute_kinematics(PoseSequence(rng.normal(size=(t, 27, 2)))),
                                  labels, t + extra)
        assert f.num_frames == len(lab) == t + extra
        assert np.array_equal(lab == P, ~f.mask)
        assert np.all(f.features[:, t:] == 0)

    def test_too_long_rejected(self):
        f = sk.compute_kinematics(PoseSequence(np.zeros((5, 27, 2)) + np.arange(27)[None, :, None]))
        with pytest.raises(ValueError):
            sk.pad_to_length(f, np.ones(5, dtype=int), 4)

    def test_windows_cover_sequence(self):
        t = 600
        f = sk.compute_kinematics(PoseSequence(np.random.default_rng(3).normal(size=(t, 27, 2))))
        windows = sk.split_windows(f, np.ones(t, dtype=int), 256, 16)
        assert all(w.num_frames <= 256 for w, _ in windows)
        covered = np.zeros(t, bool)
        start = 0
        for w, _ in windows:
            covered[start:start + w.num_frames] = True
            start += 256 - 16
        assert covered.all()

    def test_prepare_shapes(self):
        p = PoseSequence(np.random.default_rng(4).normal(size=(30, 27, 2)))
        f, lab = sk.prepare_sequence(p, None, 64)
        x, mask = sk.stack_features([f, f])
        assert x.shape == (2, 64, 27, 6) and mask.shape == (2, 64)
        assert mask[0].sum() == 30 and np.all(lab[30:] == P)


class TestHandRemap:
    def test_shared_joints_survive(self):
        block = np.random.default_rng(5).normal(size=(7, 10, 2))
        assert np.array_equal(sk.hand_to_block(sk.block_to_hand(block)), block)

    def test_intermediate_joints_on_chain(self):
        block = np.random.default_rng(6).normal(size=(10, 2))
        hand = sk.block_to_hand(block)
        # index finger: joints 5..8 run base -> tip in thirds
        assert np.allclose(hand[6], block[2] + (block[3] - block[2]) / 3)
        assert np.allclose(hand[7], block[2] + 2 * (block[3] - block[2]) / 3)

    def test_dominant_hand_uses_right_block(self):
        frames = np.zeros((2, 27, 2))
        frames[:, 17:27] = np.random.default_rng(7).normal(size=(2, 10, 2))
        assert np.array_equal(sk.hand_to_block(sk.dominant_hand(frames)), frames[:, 17:27])

    def test_dominant_hand_needs_body(self):
        with pytest.raises(sk.SchemaError):
            sk.dominant_hand(np.zeros((2, 21, 2)))


class TestFiles:
    def test_pose_round_trip(self, tmp_path):
        p = PoseSequence(np.random.default_rng(8).normal(size=(5, 27, 2)) * 100, 25.0, "clip")
        labels = sk.labels_from_string("OBIIO")
        sk.save_pose_file(tmp_path / "a.pose", p, labels)
        q, lab = sk.load_pose_file(tmp_path / "a.pose")
        assert np.array_equal(q.frames, p.frames) and q.fps == 25.0 and q.source_id == "clip"
        assert list(lab) == list(labels)

    def test_labels_optional(self, tmp_path):
        sk.save_pose_file(tmp_path / "a.pose", PoseSequence(np.ones((2, 27, 2))))
        _, lab = sk.load_pose_file(tmp_path / "a.pose")
        assert lab is None

    def test_biio_labels(self, tmp_path):
        sk.save_pose_file(tmp_path / "a.pose", PoseSequence(np.ones((4, 27, 2))), sk.labels_from_string("BIIO"))
        _, lab = sk.load_pose_file(tmp_path / "a.pose")
        assert list(lab) == [3, 2, 2, 1]

    def test_handshape_dispatch(self, tmp_path):
        rng = np.random.default_rng(9)
        samples = [sk.HandshapeSample(rng.normal(size=(21, 2)), k) for k in (0, 86, 5)]
        sk.save_handshape_dataset(tmp_path / "h.txt", samples)
        back = sk.load_pose_file(tmp_path / "h.txt")
        assert [s.label for s in back] == [0, 86, 5]
        assert all(np.array_equal(a.joints, b.joints) for a, b in zip(samples, back))

    def test_malformed_line_reports_location(self, tmp_path):
        sk.save_pose_file(tmp_path / "a.pose", PoseSequence(np.ones((2, 27, 2))))
        lines = (tmp_path / "a.pose").read_text().splitlines()
        lines[-1] = lines[-1].replace("1.0", "oops", 1)
        (tmp_path / "a.pose").write_text("\n".join(lines))
        with pytest.raises(sk.PoseFormatError, match=f"a.pose:{len(lines)}"):
            sk.load_pose_file(tmp_path / "a.pose")

    def test_wrong_joint_count(self, tmp_path):
        (tmp_path / "a.pose").write_text("format: 1\nkind: pose\njoints: 13\n---\n" + "0 " * 26 + "\n")
        with pytest.raises(sk.SchemaError):
            sk.load_pose_file(tmp_path / "a.pose")

    def test_missing_version(self, tmp_path):
        (tmp_path / "a.pose").write_text("joints: 27\n---\n")
        with pytest.raises(sk.PoseFormatError):
            sk.load_pose_file(tmp_path / "a.pose")

    def test_confidence_channel_ignored(self, tmp_path):
        body = " ".join(["1.5 2.5 0.9"] * 27)
        (tmp_path / "a.pose").write_text(f"format: 1\nkind: pose\njoints: 27\nchannels: 3\n---\n{body}\n")
        p, _ = sk.load_pose_file(tmp_path / "a.pose")
        assert p.frames.shape == (1, 27, 2) and np.all(p.frames[..., 0] == 1.5)

    def test_label_length_mismatch(self, tmp_path):
        sk.save_pose_file(tmp_path / "a.pose", PoseSequence(np.ones((2, 27, 2))))
        text = (tmp_path / "a.pose").read_text().replace("---", "labels: BIO\n---")
        (tmp_path / "a.pose").write_text(text)
        with pytest.raises(sk.SchemaError):
            sk.load_pose_file(tmp_path / "a.pose")
