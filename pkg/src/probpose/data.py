"""Pose record files, dataset splits and the synthetic pose generator.

The generator stands in for licensed multi-view mocap at desk scale: it
builds kinematically plausible random 3D poses by forward kinematics
over the 16-joint skeleton (fixed bone lengths, bounded random joint
rotations), renders every pose from a ring of cameras, and can emit
smooth labeled pose sequences from per-template joint-angle
trajectories. It makes no claim of matching human-pose statistics; it
exists to exercise the pipeline end to end.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import geometry as geo
from .skeleton import NUM_JOINTS_2D, NUM_JOINTS_3D, Joint2D, Joint3D, Pose2D, Pose3D

POSE_FILE_FORMAT = "probpose-poses"
POSE_FILE_VERSION = 1

# Forward-kinematics tree: child joint -> (parent, rest direction,
# default bone length). Subject faces +z; y is up; left is +x.
_SKELETON_BONES: list[tuple[Joint3D, Joint3D, tuple[float, float, float], float]] = [
    (Joint3D.SPINE, Joint3D.PELVIS, (0.0, 1.0, 0.0), 0.25),
    (Joint3D.NECK, Joint3D.SPINE, (0.0, 1.0, 0.0), 0.25),
    (Joint3D.HEAD, Joint3D.NECK, (0.0, 1.0, 0.0), 0.18),
    (Joint3D.LEFT_SHOULDER, Joint3D.NECK, (1.0, 0.0, 0.0), 0.20),
    (Joint3D.RIGHT_SHOULDER, Joint3D.NECK, (-1.0, 0.0, 0.0), 0.20),
    (Joint3D.LEFT_ELBOW, Joint3D.LEFT_SHOULDER, (0.35, -0.94, 0.0), 0.28),
    (Joint3D.RIGHT_ELBOW, Joint3D.RIGHT_SHOULDER, (-0.35, -0.94, 0.0), 0.28),
    (Joint3D.LEFT_WRIST, Joint3D.LEFT_ELBOW, (0.0, -1.0, 0.0), 0.25),
    (Joint3D.RIGHT_WRIST, Joint3D.RIGHT_ELBOW, (0.0, -1.0, 0.0), 0.25),
    (Joint3D.LEFT_HIP, Joint3D.PELVIS, (1.0, 0.0, 0.0), 0.12),
    (Joint3D.RIGHT_HIP, Joint3D.PELVIS, (-1.0, 0.0, 0.0), 0.12),
    (Joint3D.LEFT_KNEE, Joint3D.LEFT_HIP, (0.0, -1.0, 0.0), 0.42),
    (Joint3D.RIGHT_KNEE, Joint3D.RIGHT_HIP, (0.0, -1.0, 0.0), 0.42),
    (Joint3D.LEFT_ANKLE, Joint3D.LEFT_KNEE, (0.0, -1.0, 0.0), 0.42),
    (Joint3D.RIGHT_ANKLE, Joint3D.RIGHT_KNEE, (0.0, -1.0, 0.0), 0.42),
]

# Maximum local rotation angle (degrees) per child joint.
DEFAULT_ANGLE_RANGES: dict[str, float] = {
    "SPINE": 14.0,
    "NECK": 12.0,
    "HEAD": 18.0,
    "LEFT_SHOULDER": 10.0,
    "RIGHT_SHOULDER": 10.0,
    "LEFT_ELBOW": 55.0,
    "RIGHT_ELBOW": 55.0,
    "LEFT_WRIST": 60.0,
    "RIGHT_WRIST": 60.0,
    "LEFT_HIP": 8.0,
    "RIGHT_HIP": 8.0,
    "LEFT_KNEE": 45.0,
    "RIGHT_KNEE": 45.0,
    "LEFT_ANKLE": 55.0,
    "RIGHT_ANKLE": 55.0,
}

DEFAULT_BONE_LENGTHS: dict[str, float] = {
    child.name: length for child, _, _, length in _SKELETON_BONES
}


class DataFormatError(ValueError):
    """Malformed pose record file."""


@dataclass(frozen=True)
class CameraSpec:
    """A fixed synthetic camera: view rotation plus distance."""

    camera_id: str
    azimuth_deg: float
    elevation_deg: float
    roll_deg: float = 0.0
    distance: float = geo.DEFAULT_CAMERA_DISTANCE

    def rotation(self) -> geo.Rotation3D:
        return geo.euler_to_rotation(self.azimuth_deg, self.elevation_deg, self.roll_deg)


def camera_ring(
    count: int,
    elevation_deg: float = 0.0,
    distance: float = geo.DEFAULT_CAMERA_DISTANCE,
    prefix: str = "cam",
    azimuth_offset_deg: float = 0.0,
) -> list[CameraSpec]:
    """Evenly spaced cameras around the subject at one elevation."""
    if count < 1:
        raise ValueError("camera ring needs at least one camera")
    step = 360.0 / count
    return [
        CameraSpec(f"{prefix}{i}", azimuth_offset_deg + i * step, elevation_deg,
                   0.0, distance)
        for i in range(count)
    ]


@dataclass
class PoseRecord:
    """One observation: a 2D pose and/or its 3D groundtruth."""

    sample_id: str
    subject_id: str
    frame_index: int
    camera_id: str
    pose2d: Pose2D | None = None
    confidences: np.ndarray | None = None
    pose3d: Pose3D | None = None
    action_label: str | None = None
    video_id: str | None = None

    def __post_init__(self):
        if not self.sample_id or not self.subject_id:
            raise ValueError("sample_id and subject_id must be nonempty")
        if self.pose2d is None and self.pose3d is None:
            raise ValueError("record needs a 2D pose or a 3D pose")
        if self.confidences is not None:
            conf = np.asarray(self.confidences, dtype=np.float64)
            if conf.shape != (NUM_JOINTS_2D,):
                raise ValueError("confidences must have shape (13,)")
            self.confidences = conf


@dataclass
class PoseDataset:
    records: list[PoseRecord]
    cameras: dict[str, CameraSpec] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})

    def camera_ids(self) -> list[str]:
        return sorted({r.camera_id for r in self.records})

    def by_camera(self, camera_id: str) -> list[PoseRecord]:
        return [r for r in self.records if r.camera_id == camera_id]

    def videos(self) -> dict[str, list[PoseRecord]]:
        """Records grouped by video id, frames in order."""
        out: dict[str, list[PoseRecord]] = {}
        for r in self.records:
            if r.video_id is not None:
                out.setdefault(r.video_id, []).append(r)
        for frames in out.values():
            frames.sort(key=lambda r: r.frame_index)
        return out


# ---------------------------------------------------------------------------
# File I/O: line-delimited JSON with a self-describing header.
# ---------------------------------------------------------------------------


def _pose2d_to_json(pose: Pose2D) -> dict:
    return {"coords": pose.coords.tolist(), "visibility": pose.visibility.tolist()}


def _pose3d_to_json(pose: Pose3D) -> dict:
    return {"coords": pose.coords.tolist(), "visibility": pose.visibility.tolist()}


def save_records(path, dataset: PoseDataset) -> None:
    header = {
        "format": POSE_FILE_FORMAT,
        "version": POSE_FILE_VERSION,
        "joint_order_3d": [j.name for j in Joint3D],
        "joint_order_2d": [j.name for j in Joint2D],
        "cameras": {cid: asdict(c) for cid, c in dataset.cameras.items()},
        "meta": dataset.meta,
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for r in dataset.records:
            row = {
                "sample_id": r.sample_id,
                "subject_id": r.subject_id,
                "frame_index": r.frame_index,
                "camera_id": r.camera_id,
            }
            if r.pose2d is not None:
                row["pose2d"] = _pose2d_to_json(r.pose2d)
            if r.pose3d is not None:
                row["pose3d"] = _pose3d_to_json(r.pose3d)
            if r.confidences is not None:
                row["confidences"] = r.confidences.tolist()
            if r.action_label is not None:
                row["action_label"] = r.action_label
            if r.video_id is not None:
                row["video_id"] = r.video_id
            f.write(json.dumps(row) + "\n")


def load_records(path) -> PoseDataset:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in (line.strip() for line in f) if ln]
    if not lines:
        return PoseDataset(records=[])
    header = json.loads(lines[0])
    if header.get("format") != POSE_FILE_FORMAT:
        raise DataFormatError("not a pose record file")
    if header.get("version") != POSE_FILE_VERSION:
        raise DataFormatError(f"unsupported version {header.get('version')!r}")
    cameras = {
        cid: CameraSpec(**spec) for cid, spec in header.get("cameras", {}).items()
    }
    records = []
    for ln in lines[1:]:
        row = json.loads(ln)
        pose2d = None
        if "pose2d" in row:
            pose2d = Pose2D(
                np.array(row["pose2d"]["coords"]),
                np.array(row["pose2d"]["visibility"], dtype=bool),
            )
        pose3d = None
        if "pose3d" in row:
            pose3d = Pose3D(
                np.array(row["pose3d"]["coords"]),
                np.array(row["pose3d"]["visibility"], dtype=bool),
            )
        conf = np.array(row["confidences"]) if "confidences" in row else None
        records.append(
            PoseRecord(
                sample_id=row["sample_id"],
                subject_id=row["subject_id"],
                frame_index=row["frame_index"],
                camera_id=row["camera_id"],
                pose2d=pose2d,
                confidences=conf,
                pose3d=pose3d,
                action_label=row.get("action_label"),
                video_id=row.get("video_id"),
            )
        )
    return PoseDataset(records=records, cameras=cameras, meta=header.get("meta", {}))


def split_by_subject(
    dataset: PoseDataset, train_subjects: list[str], val_subjects: list[str]
) -> tuple[PoseDataset, PoseDataset]:
    """Disjoint train/validation split on subject ids."""
    overlap = set(train_subjects) & set(val_subjects)
    if overlap:
        raise ValueError(f"subjects in both splits: {sorted(overlap)}")
    train = [r for r in dataset.records if r.subject_id in set(train_subjects)]
    val = [r for r in dataset.records if r.subject_id in set(val_subjects)]
    return (
        PoseDataset(train, dataset.cameras, dict(dataset.meta)),
        PoseDataset(val, dataset.cameras, dict(dataset.meta)),
    )


# ---------------------------------------------------------------------------
# Synthetic generation.
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    """Settings for the synthetic multi-view pose generator."""

    num_poses: int = 2000
    num_subjects: int = 8
    cameras: list[CameraSpec] = field(default_factory=lambda: camera_ring(4))
    bone_lengths: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_BONE_LENGTHS)
    )
    angle_ranges: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_ANGLE_RANGES)
    )
    keypoint_jitter: float = 0.0  # gaussian sigma in projected units
    # sequence generation
    num_templates: int = 5
    videos_per_template: int = 4
    sequence_length: int = 40
    smoothness: float = 1.0  # motion cycles per sequence; 0 freezes motion
    speed_warp: float = 1.0  # max speed factor; 1 disables warping
    seed: int = 0

    def __post_init__(self):
        if any(v <= 0 for v in self.bone_lengths.values()):
            raise ValueError("bone lengths must be positive")
        if len(self.cameras) < 2:
            raise ValueError("need at least two cameras")

    def to_meta(self) -> dict:
        meta = asdict(self)
        meta["cameras"] = [asdict(c) for c in self.cameras]
        return meta


def _axis_angle_matrix(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    cross = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0.0]])
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(axis, axis)


def forward_kinematics(
    local_rotations: dict[str, np.ndarray],
    bone_lengths: dict[str, float],
) -> Pose3D:
    """Pose coordinates from per-bone local rotations.

    Each bone's global rotation composes its parent's with its own
    local rotation; the bone extends from the parent joint along the
    rotated rest direction.
    """
    coords = np.zeros((NUM_JOINTS_3D, 3))
    global_rot = {int(Joint3D.PELVIS): np.eye(3)}
    for child, parent, rest_dir, _ in _SKELETON_BONES:
        local = local_rotations.get(child.name, np.eye(3))
        g = global_rot[int(parent)] @ local
        global_rot[int(child)] = g
        direction = np.asarray(rest_dir, dtype=np.float64)
        direction = direction / np.linalg.norm(direction)
        coords[int(child)] = coords[int(parent)] + g @ (
            direction * bone_lengths[child.name]
        )
    return Pose3D(coords)


def _random_local_rotations(cfg: SyntheticConfig, rng: np.random.Generator):
    rotations = {}
    for child, _, _, _ in _SKELETON_BONES:
        max_angle = np.deg2rad(cfg.angle_ranges.get(child.name, 0.0))
        axis = rng.normal(size=3)
        angle = rng.uniform(-max_angle, max_angle)
        rotations[child.name] = _axis_angle_matrix(axis, angle)
    return rotations


def render_record(
    pose_norm: Pose3D,
    camera: CameraSpec,
    subject_id: str,
    frame_index: int,
    jitter: float,
    rng: np.random.Generator,
    action_label: str | None = None,
    video_id: str | None = None,
) -> PoseRecord:
    """Render one normalized 3D pose from one camera into a record."""
    projected = geo.project_pose(
        geo.rotate_pose3d(pose_norm, camera.rotation()), camera.distance
    )
    coords = projected.coords
    if jitter > 0:
        coords = coords + rng.normal(size=coords.shape) * jitter
    pose2d = geo.normalize_pose2d(Pose2D(coords))
    sample_id = f"s{subject_id}/f{frame_index}/c{camera.camera_id}"
    if video_id is not None:
        sample_id = f"{video_id}/f{frame_index}/c{camera.camera_id}"
    return PoseRecord(
        sample_id=sample_id,
        subject_id=subject_id,
        frame_index=frame_index,
        camera_id=camera.camera_id,
        pose2d=pose2d,
        pose3d=pose_norm,
        action_label=action_label,
        video_id=video_id,
    )


def generate_synthetic_poses(cfg: SyntheticConfig) -> PoseDataset:
    """Random multi-view still poses with 3D groundtruth."""
    rng = np.random.default_rng(cfg.seed)
    records: list[PoseRecord] = []
    for i in range(cfg.num_poses):
        subject = f"S{i % cfg.num_subjects}"
        pose = forward_kinematics(_random_local_rotations(cfg, rng), cfg.bone_lengths)
        pose_norm = geo.normalize_pose3d(pose)
        for camera in cfg.cameras:
            records.append(
                render_record(pose_norm, camera, subject, i, cfg.keypoint_jitter, rng)
            )
    cameras = {c.camera_id: c for c in cfg.cameras}
    return PoseDataset(records, cameras, {"generator": "poses", "config": cfg.to_meta()})


@dataclass
class _ActionTemplate:
    axes: dict[str, np.ndarray]
    amplitudes: dict[str, float]
    frequencies: dict[str, float]
    phases: dict[str, float]
    offsets: dict[str, float]


def _make_template(cfg: SyntheticConfig, rng: np.random.Generator) -> _ActionTemplate:
    axes, amplitudes, frequencies, phases, offsets = {}, {}, {}, {}, {}
    for child, _, _, _ in _SKELETON_BONES:
        name = child.name
        max_angle = np.deg2rad(cfg.angle_ranges.get(name, 0.0))
        axes[name] = rng.normal(size=3)
        amplitudes[name] = rng.uniform(0.35, 1.0) * max_angle
        frequencies[name] = rng.integers(1, 3) * cfg.smoothness
        phases[name] = rng.uniform(0, 2 * np.pi)
        offsets[name] = rng.uniform(-0.3, 0.3) * max_angle
    return _ActionTemplate(axes, amplitudes, frequencies, phases, offsets)


def _template_pose(template: _ActionTemplate, cfg: SyntheticConfig, time: float) -> Pose3D:
    rotations = {}
    for name, axis in template.axes.items():
        angle = template.offsets[name] + template.amplitudes[name] * np.sin(
            2 * np.pi * template.frequencies[name] * time + template.phases[name]
        )
        rotations[name] = _axis_angle_matrix(axis, angle)
    return forward_kinematics(rotations, cfg.bone_lengths)


def generate_synthetic_sequences(cfg: SyntheticConfig) -> PoseDataset:
    """Labeled multi-view pose videos from smooth action templates.

    Each template defines per-bone sinusoidal joint-angle trajectories;
    each video of a template gets a random speed-warp factor. All
    cameras render the same 3D frames, so cross-view pairs are
    frame-synchronized.
    """
    rng = np.random.default_rng(cfg.seed)
    templates = [_make_template(cfg, rng) for _ in range(cfg.num_templates)]
    records: list[PoseRecord] = []
    video_counter = 0
    for t_index, template in enumerate(templates):
        label = f"action{t_index}"
        for v in range(cfg.videos_per_template):
            subject = f"S{video_counter % cfg.num_subjects}"
            video_id = f"vid{video_counter:04d}"
            video_counter += 1
            if cfg.speed_warp > 1.0:
                warp = rng.uniform(1.0 / cfg.speed_warp, cfg.speed_warp)
            else:
                warp = 1.0
            start = rng.uniform(0, 1) if cfg.speed_warp > 1.0 else 0.0
            for frame in range(cfg.sequence_length):
                time = start + warp * frame / max(cfg.sequence_length - 1, 1)
                pose_norm = geo.normalize_pose3d(_template_pose(template, cfg, time))
                for camera in cfg.cameras:
                    records.append(
                        render_record(
                            pose_norm, camera, subject, frame,
                            cfg.keypoint_jitter, rng,
                            action_label=label, video_id=video_id,
                        )
                    )
    cameras = {c.camera_id: c for c in cfg.cameras}
    return PoseDataset(
        records, cameras, {"generator": "sequences", "config": cfg.to_meta()}
    )


# ---------------------------------------------------------------------------
# Near-duplicate removal and frame indexing.
# ---------------------------------------------------------------------------


def dedup_by_np_mpjpe(dataset: PoseDataset, threshold: float = 0.02) -> PoseDataset:
    """Greedy camera-consistent removal of near-duplicate 3D poses.

    Frames are visited in ascending (subject, frame) order; a frame is
    kept iff its aligned error to every previously kept frame exceeds
    the threshold. A removed frame disappears from all cameras.
    """
    frames: dict[tuple[str, int], Pose3D] = {}
    for r in dataset.records:
        if r.pose3d is not None:
            frames.setdefault((r.subject_id, r.frame_index), r.pose3d)
    keys = sorted(frames.keys())
    if not keys:
        return PoseDataset(list(dataset.records), dataset.cameras, dict(dataset.meta))
    norm = geo.normalize_many3d(np.stack([frames[k].coords for k in keys]))
    kept_indices: list[int] = []
    for i in range(len(keys)):
        if kept_indices:
            matches = geo.match_matrix(
                norm[i : i + 1], norm[kept_indices], kappa=threshold
            )
            if matches.any():
                continue
        kept_indices.append(i)
    kept_keys = {keys[i] for i in kept_indices}
    records = [
        r
        for r in dataset.records
        if r.pose3d is None or (r.subject_id, r.frame_index) in kept_keys
    ]
    return PoseDataset(records, dataset.cameras, dict(dataset.meta))


@dataclass
class FrameIndex:
    """Array view of a multi-view dataset keyed by (subject, frame).

    ``gt_normalized``: (F, 16, 3) normalized 3D groundtruth;
    ``inputs[camera_id]``: (F, 13, 2) normalized 2D coordinates;
    entries align with ``keys``.
    """

    keys: list[tuple[str, int]]
    gt_normalized: np.ndarray
    inputs: dict[str, np.ndarray]
    subjects: np.ndarray

    def __len__(self) -> int:
        return len(self.keys)


def build_frame_index(dataset: PoseDataset, key_by_video: bool = False) -> FrameIndex:
    """Index frames by (subject, frame) or, for videos, (video, frame)."""
    frames: dict[tuple[str, int], dict] = {}
    for r in dataset.records:
        owner = r.video_id if key_by_video else r.subject_id
        if owner is None:
            continue
        key = (owner, r.frame_index)
        entry = frames.setdefault(key, {"gt": None, "views": {}})
        if r.pose3d is not None and entry["gt"] is None:
            entry["gt"] = r.pose3d
        if r.pose2d is not None:
            entry["views"][r.camera_id] = r.pose2d
    keys = sorted(k for k, e in frames.items() if e["gt"] is not None)
    if not keys:
        raise ValueError("dataset has no frames with 3D groundtruth")
    gt = geo.normalize_many3d(np.stack([frames[k]["gt"].coords for k in keys]))
    camera_ids = sorted({c for k in keys for c in frames[k]["views"]})
    inputs = {}
    for cid in camera_ids:
        rows = []
        for k in keys:
            pose = frames[k]["views"].get(cid)
            rows.append(pose.coords if pose is not None else np.zeros((NUM_JOINTS_2D, 2)))
        inputs[cid] = np.stack(rows)
    subjects = np.array([k[0] for k in keys])
    return FrameIndex(keys=keys, gt_normalized=gt, inputs=inputs, subjects=subjects)
