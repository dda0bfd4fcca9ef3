"""Synthetic generator, file round-trip, split and dedup tests."""

import numpy as np
import pytest

from probpose import data, geometry as geo
from probpose.skeleton import Joint3D, Pose3D


def small_config(**overrides):
    cfg = data.SyntheticConfig(
        num_poses=12,
        num_subjects=3,
        cameras=data.camera_ring(3),
        num_templates=2,
        videos_per_template=2,
        sequence_length=8,
        seed=7,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


class TestGeneratorPoses:
    def test_deterministic_under_seed(self):
        a = data.generate_synthetic_poses(small_config())
        b = data.generate_synthetic_poses(small_config())
        assert len(a) == len(b)
        for ra, rb in zip(a.records, b.records):
            assert ra.sample_id == rb.sample_id
            assert np.array_equal(ra.pose2d.coords, rb.pose2d.coords)
            assert np.array_equal(ra.pose3d.coords, rb.pose3d.coords)

    def test_zero_angle_ranges_give_rest_pose(self):
        cfg = small_config(angle_ranges={k: 0.0 for k in data.DEFAULT_ANGLE_RANGES})
        ds = data.generate_synthetic_poses(cfg)
        gts = {r.frame_index: r.pose3d.coords for r in ds.records}
        base = gts[0]
        for coords in gts.values():
            assert np.allclose(coords, base, atol=1e-12)

    def test_every_pose_normalizes(self):
        ds = data.generate_synthetic_poses(small_config())
        for r in ds.records:
            out = geo.normalize_pose3d(r.pose3d)
            assert np.all(np.isfinite(out.coords))

    def test_multi_view_consistency(self):
        # noiseless rendering: projecting the stored groundtruth from
        # the record's camera must reproduce the stored 2D pose
        ds = data.generate_synthetic_poses(small_config(keypoint_jitter=0.0))
        for r in ds.records[:30]:
            cam = ds.cameras[r.camera_id]
            rendered = geo.normalize_pose2d(
                geo.project_pose(geo.rotate_pose3d(r.pose3d, cam.rotation()), cam.distance)
            )
            assert np.allclose(rendered.coords, r.pose2d.coords, atol=1e-9)

    def test_groundtruth_is_normalized(self):
        ds = data.generate_synthetic_poses(small_config())
        r = ds.records[0]
        assert np.allclose(r.pose3d[Joint3D.PELVIS], 0.0, atol=1e-12)

    def test_bone_lengths_respected(self):
        cfg = small_config()
        ds = data.generate_synthetic_poses(cfg)
        raw = data.forward_kinematics({}, cfg.bone_lengths)
        knee = np.linalg.norm(
            raw[Joint3D.LEFT_KNEE] - raw[Joint3D.LEFT_HIP]
        )
        assert abs(knee - cfg.bone_lengths["LEFT_KNEE"]) < 1e-12


class TestGeneratorSequences:
    def test_views_are_frame_synchronized(self):
        ds = data.generate_synthetic_sequences(small_config(speed_warp=1.0))
        videos = ds.videos()
        vid = next(iter(videos.values()))
        by_frame = {}
        for r in vid:
            by_frame.setdefault(r.frame_index, []).append(r)
        for frame_records in by_frame.values():
            gt0 = frame_records[0].pose3d.coords
            for r in frame_records[1:]:
                assert np.array_equal(r.pose3d.coords, gt0)

    def test_smoothness_zero_is_static(self):
        ds = data.generate_synthetic_sequences(small_config(smoothness=0.0))
        for frames in ds.videos().values():
            by_frame = {}
            for r in frames:
                by_frame.setdefault(r.frame_index, r)
            coords = [by_frame[i].pose3d.coords for i in sorted(by_frame)]
            for c in coords[1:]:
                assert np.allclose(c, coords[0], atol=1e-12)

    def test_distinct_templates_differ(self):
        ds = data.generate_synthetic_sequences(small_config(sequence_length=6))
        videos = ds.videos()
        by_label = {}
        for vid_id, frames in videos.items():
            label = frames[0].action_label
            gts = {}
            for r in frames:
                gts.setdefault(r.frame_index, r.pose3d)
            by_label.setdefault(label, []).append(
                [gts[i] for i in sorted(gts)]
            )
        seq_a = by_label["action0"][0]
        seq_b = by_label["action1"][0]
        err = geo.sequence_np_mpjpe(seq_a, seq_b)
        assert err > 0.1

    def test_labels_and_videos_populated(self):
        ds = data.generate_synthetic_sequences(small_config())
        assert all(r.action_label is not None for r in ds.records)
        videos = ds.videos()
        assert len(videos) == 4  # 2 templates x 2 videos
        labels = {frames[0].action_label for frames in videos.values()}
        assert labels == {"action0", "action1"}


class TestFileRoundTrip:
    def test_roundtrip_lossless(self, tmp_path):
        ds = data.generate_synthetic_poses(small_config(keypoint_jitter=0.003))
        path = tmp_path / "poses.jsonl"
        data.save_records(path, ds)
        loaded = data.load_records(path)
        assert len(loaded) == len(ds)
        assert loaded.cameras.keys() == ds.cameras.keys()
        for ra, rb in zip(ds.records, loaded.records):
            assert ra.sample_id == rb.sample_id
            assert np.array_equal(ra.pose2d.coords, rb.pose2d.coords)
            assert np.array_equal(ra.pose2d.visibility, rb.pose2d.visibility)
            assert np.array_equal(ra.pose3d.coords, rb.pose3d.coords)

    def test_empty_file_gives_empty_set(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        ds = data.load_records(path)
        assert len(ds) == 0

    def test_bad_format_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"format": "something-else", "version": 1}\n')
        with pytest.raises(data.DataFormatError):
            data.load_records(path)

    def test_record_requires_some_pose(self):
        with pytest.raises(ValueError):
            data.PoseRecord("id", "S0", 0, "cam0")


class TestSplits:
    def test_disjoint_by_subject(self):
        ds = data.generate_synthetic_poses(small_config())
        train, val = data.split_by_subject(ds, ["S0", "S1"], ["S2"])
        assert set(r.subject_id for r in train.records) == {"S0", "S1"}
        assert set(r.subject_id for r in val.records) == {"S2"}
        assert len(train) + len(val) == len(ds)

    def test_overlap_rejected(self):
        ds = data.generate_synthetic_poses(small_config())
        with pytest.raises(ValueError):
            data.split_by_subject(ds, ["S0", "S1"], ["S1"])

    def test_deterministic(self):
        ds = data.generate_synthetic_poses(small_config())
        a, _ = data.split_by_subject(ds, ["S0"], ["S1"])
        b, _ = data.split_by_subject(ds, ["S0"], ["S1"])
        assert [r.sample_id for r in a.records] == [r.sample_id for r in b.records]


class TestDedup:
    def _dataset_from_poses(self, poses):
        cams = data.camera_ring(2)
        rng = np.random.default_rng(0)
        records = []
        for i, p in enumerate(poses):
            norm = geo.normalize_pose3d(p)
            for cam in cams:
                records.append(
                    data.render_record(norm, cam, "S0", i, 0.0, rng)
                )
        return data.PoseDataset(records, {c.camera_id: c for c in cams})

    def test_identical_poses_collapse_to_one(self):
        pose = data.forward_kinematics(
            data._random_local_rotations(small_config(), np.random.default_rng(1)),
            data.DEFAULT_BONE_LENGTHS,
        )
        ds = self._dataset_from_poses([pose] * 5)
        out = data.dedup_by_np_mpjpe(ds, threshold=0.02)
        frames = {r.frame_index for r in out.records}
        assert frames == {0}

    def test_distant_poses_all_kept(self):
        cfg = small_config()
        rng = np.random.default_rng(2)
        poses = [
            data.forward_kinematics(data._random_local_rotations(cfg, rng),
                                    cfg.bone_lengths)
            for _ in range(6)
        ]
        ds = self._dataset_from_poses(poses)
        out = data.dedup_by_np_mpjpe(ds, threshold=0.001)
        assert {r.frame_index for r in out.records} == set(range(6))

    def test_constructed_near_duplicate_removed(self):
        cfg = small_config()
        rng = np.random.default_rng(3)
        base = data.forward_kinematics(
            data._random_local_rotations(cfg, rng), cfg.bone_lengths
        )
        nudged = Pose3D(base.coords + rng.normal(size=(16, 3)) * 1e-3)
        far = data.forward_kinematics(
            data._random_local_rotations(cfg, rng), cfg.bone_lengths
        )
        assert geo.np_mpjpe(base, nudged) < 0.02
        assert geo.np_mpjpe(base, far) > 0.02
        ds = self._dataset_from_poses([base, nudged, far])
        out = data.dedup_by_np_mpjpe(ds, threshold=0.02)
        assert {r.frame_index for r in out.records} == {0, 2}

    def test_camera_consistent_removal(self):
        pose = data.forward_kinematics(
            data._random_local_rotations(small_config(), np.random.default_rng(4)),
            data.DEFAULT_BONE_LENGTHS,
        )
        ds = self._dataset_from_poses([pose, pose])
        out = data.dedup_by_np_mpjpe(ds)
        # frame 1 removed from every camera
        assert all(r.frame_index == 0 for r in out.records)
        assert len({r.camera_id for r in out.records}) == 2


class TestFrameIndex:
    def test_index_aligns_views(self):
        ds = data.generate_synthetic_poses(small_config())
        index = data.build_frame_index(ds)
        assert len(index) == 12
        assert set(index.inputs.keys()) == {"cam0", "cam1", "cam2"}
        # spot-check alignment of one record
        r = ds.records[5]
        key = (r.subject_id, r.frame_index)
        i = index.keys.index(key)
        assert np.array_equal(index.inputs[r.camera_id][i], r.pose2d.coords)

    def test_requires_groundtruth(self):
        records = [
            data.PoseRecord(
                "a", "S0", 0, "cam0",
                pose2d=geo.normalize_pose2d(
                    __import__("probpose.skeleton", fromlist=["Pose2D"]).Pose2D(
                        np.random.default_rng(0).normal(size=(13, 2))
                    )
                ),
            )
        ]
        ds = data.PoseDataset(records)
        with pytest.raises(ValueError):
            data.build_frame_index(ds)
