"""Clip sampling, temporal network and sequence label tests."""

import numpy as np
import pytest

from probpose import geometry as geo
from probpose import nn, temporal
from probpose.skeleton import Pose2D, Pose3D, pose2d_input_vector


def make_net(**overrides):
    cfg = temporal.TemporalNetworkConfig(
        input_dim=10, hidden_dim=12, embedding_dim=6, clip_length=5, dropout=0.0
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return temporal.TemporalNetwork(cfg, np.random.default_rng(0))


class TestClipSampling:
    def test_rate1_centered(self):
        spec = temporal.ClipSpec(length=7, atrous_rate=1)
        idx = temporal.clip_frame_indices(7, 3, spec)
        assert idx.tolist() == [0, 1, 2, 3, 4, 5, 6]

    def test_rate4_arithmetic(self):
        spec = temporal.ClipSpec(length=7, atrous_rate=4)
        idx = temporal.clip_frame_indices(100, 12, spec)
        assert idx.tolist() == [0, 4, 8, 12, 16, 20, 24]

    def test_left_clamping(self):
        spec = temporal.ClipSpec(length=7, atrous_rate=2)
        idx = temporal.clip_frame_indices(50, 0, spec)
        assert idx.tolist() == [0, 0, 0, 0, 2, 4, 6]

    def test_right_clamping(self):
        spec = temporal.ClipSpec(length=5, atrous_rate=3)
        idx = temporal.clip_frame_indices(10, 9, spec)
        assert idx.tolist() == [3, 6, 9, 9, 9]

    def test_span_matches_half_second_rates(self):
        # 50 Hz -> rate 4 -> 24 frames ~ 0.48 s; 25 Hz -> rate 2 -> 12 frames
        assert temporal.ClipSpec(7, 4).span == 24
        assert temporal.ClipSpec(7, 2).span == 12

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError):
            temporal.clip_frame_indices(0, 0, temporal.ClipSpec())

    def test_even_length_rejected(self):
        with pytest.raises(ValueError):
            temporal.ClipSpec(length=4)

    def test_sample_clip_returns_frames(self):
        frames = [f"frame{i}" for i in range(30)]
        spec = temporal.ClipSpec(length=3, atrous_rate=5)
        assert temporal.sample_clip(frames, 10, spec) == ["frame5", "frame10", "frame15"]


class TestTemporalNetwork:
    def test_eval_deterministic(self):
        net = make_net(dropout=0.3)
        clips = np.random.default_rng(1).normal(size=(4, 5, 10))
        a = net.forward(clips)
        b = net.forward(clips)
        assert np.array_equal(a.mean, b.mean)

    def test_frame_order_sensitivity(self):
        net = make_net()
        rng = np.random.default_rng(2)
        clip = rng.normal(size=(1, 5, 10))
        base = net.forward(clip).mean
        permuted = clip[:, ::-1].copy()
        out = net.forward(permuted).mean
        assert not np.allclose(base, out)

    def test_t1_structural_degenerate(self):
        net = make_net(clip_length=1)
        clips = np.random.default_rng(3).normal(size=(3, 1, 10))
        out = net.forward(clips)
        assert out.mean.shape == (3, 6)

    def test_wrong_clip_length_rejected(self):
        net = make_net()
        with pytest.raises(ValueError):
            net.forward(np.zeros((2, 4, 10)))

    def test_gradients_match_fd(self):
        net = make_net(dropout=0.3)
        clips = np.random.default_rng(4).normal(size=(3, 5, 10))
        seed = 5

        def value_fn():
            out = net.forward(clips, train=True, rng=np.random.default_rng(seed))
            return float((out.mean ** 2).sum() + out.variance.sum())

        def grad_fn():
            nn.zero_gradients(net.parameters())
            out = net.forward(clips, train=True, rng=np.random.default_rng(seed))
            loss = float((out.mean ** 2).sum() + out.variance.sum())
            net.backward(2.0 * out.mean, np.ones_like(out.variance))
            return loss

        report = nn.gradient_check(
            value_fn, grad_fn, net.parameters(), np.random.default_rng(6),
            num_coords=200,
        )
        assert report.max_rel_error < 1e-4, (report.worst_name, report.max_rel_error)

    def test_checkpoint_roundtrip(self, tmp_path):
        net = make_net()
        clips = np.random.default_rng(7).normal(size=(2, 5, 10))
        expected = net.forward(clips)
        path = tmp_path / "temporal.npz"
        nn.save_checkpoint(path, net)
        meta, arrays = nn.load_checkpoint(path)
        assert meta["network"]["kind"] == "temporal"
        net2 = temporal.TemporalNetwork.from_meta(meta["network"])
        nn.restore_network(net2, arrays)
        out = net2.forward(clips)
        assert np.array_equal(out.mean, expected.mean)

    def test_embed_sequence_wrapper(self):
        net = make_net(input_dim=39, clip_length=3)
        rng = np.random.default_rng(8)
        clip = [Pose2D(rng.normal(size=(13, 2))) for _ in range(3)]
        e = temporal.embed_sequence(net, clip)
        assert e.mean.shape == (6,)
        rows = np.stack([pose2d_input_vector(p) for p in clip])
        batch = net.forward(rows[None])
        assert np.array_equal(batch.mean[0], e.mean)

    def test_embed_sequence_length_checked(self):
        net = make_net(input_dim=39, clip_length=3)
        rng = np.random.default_rng(9)
        clip = [Pose2D(rng.normal(size=(13, 2))) for _ in range(4)]
        with pytest.raises(ValueError):
            temporal.embed_sequence(net, clip)


def random_pose3d(rng):
    return Pose3D(rng.normal(size=(16, 3)))


class TestSequenceLabels:
    def test_identical_sequences_match(self):
        rng = np.random.default_rng(10)
        seq = [random_pose3d(rng) for _ in range(4)]
        assert temporal.sequence_match_label(seq, seq, kappa=0.1)

    def test_one_bad_frame_breaks_match(self):
        rng = np.random.default_rng(11)
        seq = [random_pose3d(rng) for _ in range(3)]
        other = list(seq)
        other[1] = random_pose3d(rng)
        err = geo.np_mpjpe(seq[1], other[1])
        assert err > 0.1
        assert not temporal.sequence_match_label(seq, other, kappa=0.1)

    def test_boundary_inclusive(self):
        rng = np.random.default_rng(12)
        a = [random_pose3d(rng) for _ in range(2)]
        b = [random_pose3d(rng) for _ in range(2)]
        err = geo.sequence_np_mpjpe(a, b)
        assert temporal.sequence_match_label(a, b, kappa=err)


class TestClipAugmentation:
    def test_shared_rotation_across_frames(self):
        # all frames of an augmented clip must see the same rotation:
        # rendering frame-by-frame with the recovered rotation matches
        rng = np.random.default_rng(13)
        base = np.array([
            [0, 0, 0], [0, 0.25, 0], [0, 0.5, 0], [0, 0.68, 0],
            [0.18, 0.5, 0], [-0.18, 0.5, 0], [0.32, 0.3, 0], [-0.32, 0.3, 0],
            [0.4, 0.1, 0], [-0.4, 0.1, 0],
            [0.11, 0, 0], [-0.11, 0, 0], [0.13, -0.4, 0], [-0.13, -0.4, 0],
            [0.15, -0.8, 0], [-0.15, -0.8, 0],
        ])
        clip3d = [
            geo.normalize_pose3d(Pose3D(base + rng.normal(size=(16, 3)) * 0.05))
            for _ in range(4)
        ]
        seed_rng = np.random.default_rng(99)
        view_a, view_b = temporal.camera_augment_clip(
            clip3d, (180.0, 30.0, 30.0), seed_rng
        )
        # replay the same rotations manually
        replay = np.random.default_rng(99)
        from probpose import augmentation as aug

        rot_a = aug.sample_view_rotation((180.0, 30.0, 30.0), replay)
        rot_b = aug.sample_view_rotation((180.0, 30.0, 30.0), replay)
        for t, frame in enumerate(clip3d):
            expect_a = aug.render_view(frame, rot_a)
            expect_b = aug.render_view(frame, rot_b)
            assert np.allclose(view_a[t].coords, expect_a.coords, atol=1e-12)
            assert np.allclose(view_b[t].coords, expect_b.coords, atol=1e-12)
