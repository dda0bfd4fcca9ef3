"""Canonical keypoint schemas and dataset joint mappings.

Two fixed skeletons are used throughout the package:

* a 16-joint 3D skeleton (pelvis-rooted body tree), and
* a 13-joint 2D skeleton (COCO body joints plus the nose).

The index order defined by :class:`Joint3D` and :class:`Joint2D` is the
canonical serialization order for every file format and flattened model
input in this package.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class SchemaError(ValueError):
    """A named-joint table is missing required joints."""


class Joint3D(IntEnum):
    """Canonical 16-joint 3D skeleton, in serialization order."""

    PELVIS = 0
    SPINE = 1
    NECK = 2
    HEAD = 3
    LEFT_SHOULDER = 4
    RIGHT_SHOULDER = 5
    LEFT_ELBOW = 6
    RIGHT_ELBOW = 7
    LEFT_WRIST = 8
    RIGHT_WRIST = 9
    LEFT_HIP = 10
    RIGHT_HIP = 11
    LEFT_KNEE = 12
    RIGHT_KNEE = 13
    LEFT_ANKLE = 14
    RIGHT_ANKLE = 15


class Joint2D(IntEnum):
    """Canonical 13-joint 2D skeleton (COCO body joints + nose)."""

    NOSE = 0
    LEFT_SHOULDER = 1
    RIGHT_SHOULDER = 2
    LEFT_ELBOW = 3
    RIGHT_ELBOW = 4
    LEFT_WRIST = 5
    RIGHT_WRIST = 6
    LEFT_HIP = 7
    RIGHT_HIP = 8
    LEFT_KNEE = 9
    RIGHT_KNEE = 10
    LEFT_ANKLE = 11
    RIGHT_ANKLE = 12


NUM_JOINTS_3D = 16
NUM_JOINTS_2D = 13

# Mirror partner per joint (self for midline joints).
MIRROR_3D: dict[Joint3D, Joint3D] = {
    Joint3D.PELVIS: Joint3D.PELVIS,
    Joint3D.SPINE: Joint3D.SPINE,
    Joint3D.NECK: Joint3D.NECK,
    Joint3D.HEAD: Joint3D.HEAD,
    Joint3D.LEFT_SHOULDER: Joint3D.RIGHT_SHOULDER,
    Joint3D.RIGHT_SHOULDER: Joint3D.LEFT_SHOULDER,
    Joint3D.LEFT_ELBOW: Joint3D.RIGHT_ELBOW,
    Joint3D.RIGHT_ELBOW: Joint3D.LEFT_ELBOW,
    Joint3D.LEFT_WRIST: Joint3D.RIGHT_WRIST,
    Joint3D.RIGHT_WRIST: Joint3D.LEFT_WRIST,
    Joint3D.LEFT_HIP: Joint3D.RIGHT_HIP,
    Joint3D.RIGHT_HIP: Joint3D.LEFT_HIP,
    Joint3D.LEFT_KNEE: Joint3D.RIGHT_KNEE,
    Joint3D.RIGHT_KNEE: Joint3D.LEFT_KNEE,
    Joint3D.LEFT_ANKLE: Joint3D.RIGHT_ANKLE,
    Joint3D.RIGHT_ANKLE: Joint3D.LEFT_ANKLE,
}

MIRROR_2D: dict[Joint2D, Joint2D] = {
    Joint2D.NOSE: Joint2D.NOSE,
    Joint2D.LEFT_SHOULDER: Joint2D.RIGHT_SHOULDER,
    Joint2D.RIGHT_SHOULDER: Joint2D.LEFT_SHOULDER,
    Joint2D.LEFT_ELBOW: Joint2D.RIGHT_ELBOW,
    Joint2D.RIGHT_ELBOW: Joint2D.LEFT_ELBOW,
    Joint2D.LEFT_WRIST: Joint2D.RIGHT_WRIST,
    Joint2D.RIGHT_WRIST: Joint2D.LEFT_WRIST,
    Joint2D.LEFT_HIP: Joint2D.RIGHT_HIP,
    Joint2D.RIGHT_HIP: Joint2D.LEFT_HIP,
    Joint2D.LEFT_KNEE: Joint2D.RIGHT_KNEE,
    Joint2D.RIGHT_KNEE: Joint2D.LEFT_KNEE,
    Joint2D.LEFT_ANKLE: Joint2D.RIGHT_ANKLE,
    Joint2D.RIGHT_ANKLE: Joint2D.LEFT_ANKLE,
}

# Index permutation arrays for fast mirroring.
MIRROR_3D_INDEX = np.array([int(MIRROR_3D[Joint3D(i)]) for i in range(NUM_JOINTS_3D)])
MIRROR_2D_INDEX = np.array([int(MIRROR_2D[Joint2D(i)]) for i in range(NUM_JOINTS_2D)])

# Torso joints (2D): reliable, always treated as visible.
TORSO_2D = (
    Joint2D.LEFT_SHOULDER,
    Joint2D.RIGHT_SHOULDER,
    Joint2D.LEFT_HIP,
    Joint2D.RIGHT_HIP,
)
TORSO_2D_INDEX = np.array([int(j) for j in TORSO_2D])

# 2D -> 3D joint correspondence used by projection and partial-pose
# matching. The nose has no 3D counterpart and is approximated by the
# head joint; neck, spine and pelvis have no 2D counterpart.
JOINT_2D_TO_3D: dict[Joint2D, Joint3D] = {
    Joint2D.NOSE: Joint3D.HEAD,
    Joint2D.LEFT_SHOULDER: Joint3D.LEFT_SHOULDER,
    Joint2D.RIGHT_SHOULDER: Joint3D.RIGHT_SHOULDER,
    Joint2D.LEFT_ELBOW: Joint3D.LEFT_ELBOW,
    Joint2D.RIGHT_ELBOW: Joint3D.RIGHT_ELBOW,
    Joint2D.LEFT_WRIST: Joint3D.LEFT_WRIST,
    Joint2D.RIGHT_WRIST: Joint3D.RIGHT_WRIST,
    Joint2D.LEFT_HIP: Joint3D.LEFT_HIP,
    Joint2D.RIGHT_HIP: Joint3D.RIGHT_HIP,
    Joint2D.LEFT_KNEE: Joint3D.LEFT_KNEE,
    Joint2D.RIGHT_KNEE: Joint3D.RIGHT_KNEE,
    Joint2D.LEFT_ANKLE: Joint3D.LEFT_ANKLE,
    Joint2D.RIGHT_ANKLE: Joint3D.RIGHT_ANKLE,
}
JOINT_2D_TO_3D_INDEX = np.array(
    [int(JOINT_2D_TO_3D[Joint2D(i)]) for i in range(NUM_JOINTS_2D)]
)


def _as_float_array(values, shape, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Pose3D:
    """16 xyz keypoints with a per-joint visibility flag.

    Coordinates are in arbitrary metric units. Visibility defaults to
    all-true; invisible joints keep their coordinates (masking only
    affects which joints enter error computations).
    """

    coords: np.ndarray
    visibility: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        coords = _as_float_array(self.coords, (NUM_JOINTS_3D, 3), "coords")
        if self.visibility is None:
            vis = np.ones(NUM_JOINTS_3D, dtype=bool)
        else:
            vis = np.asarray(self.visibility, dtype=bool)
            if vis.shape != (NUM_JOINTS_3D,):
                raise ValueError("visibility must have shape (16,)")
        coords = coords.copy()
        vis = vis.copy()
        coords.setflags(write=False)
        vis.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "visibility", vis)

    def __getitem__(self, joint: Joint3D) -> np.ndarray:
        return self.coords[int(joint)]


@dataclass(frozen=True)
class Pose2D:
    """13 xy keypoints with a visibility mask.

    Invisible joints store exactly (0, 0); the four torso joints
    (shoulders and hips) must always be visible.
    """

    coords: np.ndarray
    visibility: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        coords = _as_float_array(self.coords, (NUM_JOINTS_2D, 2), "coords")
        if self.visibility is None:
            vis = np.ones(NUM_JOINTS_2D, dtype=bool)
        else:
            vis = np.asarray(self.visibility, dtype=bool)
            if vis.shape != (NUM_JOINTS_2D,):
                raise ValueError("visibility must have shape (13,)")
        if not vis[TORSO_2D_INDEX].all():
            raise ValueError("torso joints (shoulders, hips) must be visible")
        coords = coords.copy()
        coords[~vis] = 0.0
        vis = vis.copy()
        coords.setflags(write=False)
        vis.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "visibility", vis)

    def __getitem__(self, joint: Joint2D) -> np.ndarray:
        return self.coords[int(joint)]


def mirror_pose2d(pose: Pose2D) -> Pose2D:
    """Reflect a 2D pose about the vertical axis.

    X coordinates are negated and left/right joint pairs are swapped,
    both coordinates and visibility. An involution.
    """
    coords = pose.coords[MIRROR_2D_INDEX].copy()
    coords[:, 0] = -coords[:, 0]
    vis = pose.visibility[MIRROR_2D_INDEX]
    # -0.0 on masked joints would break exact-zero storage.
    coords[~vis] = 0.0
    return Pose2D(coords, vis)


def mirror_pose3d(pose: Pose3D) -> Pose3D:
    """Reflect a 3D pose about the x=0 plane, swapping left/right."""
    coords = pose.coords[MIRROR_3D_INDEX].copy()
    coords[:, 0] = -coords[:, 0]
    return Pose3D(coords, pose.visibility[MIRROR_3D_INDEX])


def _require(source: dict, names: list[str], dataset: str) -> None:
    for name in names:
        if name not in source:
            raise SchemaError(f"{dataset} table is missing joint {name!r}")


def _pose_from_named(assignments: dict[Joint3D, np.ndarray]) -> Pose3D:
    coords = np.zeros((NUM_JOINTS_3D, 3))
    for joint, xyz in assignments.items():
        coords[int(joint)] = np.asarray(xyz, dtype=np.float64)
    return Pose3D(coords)


_SIDED = [
    ("{} shoulder", {"Left": Joint3D.LEFT_SHOULDER, "Right": Joint3D.RIGHT_SHOULDER}),
    ("{} elbow", {"Left": Joint3D.LEFT_ELBOW, "Right": Joint3D.RIGHT_ELBOW}),
    ("{} wrist", {"Left": Joint3D.LEFT_WRIST, "Right": Joint3D.RIGHT_WRIST}),
    ("{} hip", {"Left": Joint3D.LEFT_HIP, "Right": Joint3D.RIGHT_HIP}),
    ("{} knee", {"Left": Joint3D.LEFT_KNEE, "Right": Joint3D.RIGHT_KNEE}),
    ("{} ankle", {"Left": Joint3D.LEFT_ANKLE, "Right": Joint3D.RIGHT_ANKLE}),
]


def _sided_names() -> list[tuple[str, Joint3D]]:
    out = []
    for template, sides in _SIDED:
        for side, joint in sides.items():
            out.append((template.format(side), joint))
    return out


def map_h36m_joints(source: dict[str, np.ndarray]) -> Pose3D:
    """Map a Human3.6M-style named-joint table to the canonical skeleton.

    The "Neck/Nose" joint is discarded and "Thorax" becomes the
    canonical neck. All other joints map by name.
    """
    limbs = _sided_names()
    required = ["Pelvis", "Spine", "Thorax", "Head"] + [n for n, _ in limbs]
    _require(source, required, "Human3.6M")
    assignments = {
        Joint3D.PELVIS: source["Pelvis"],
        Joint3D.SPINE: source["Spine"],
        Joint3D.NECK: source["Thorax"],
        Joint3D.HEAD: source["Head"],
    }
    for name, joint in limbs:
        assignments[joint] = source[name]
    return _pose_from_named(assignments)


def map_3dhp_joints(source: dict[str, np.ndarray]) -> Pose3D:
    """Map an MPI-INF-3DHP-style table; the "Head top" joint is dropped.

    The source "Head" joint feeds the canonical head (name-based; the
    head-top/head distinction is noted as ambiguous in the docs).
    """
    limbs = _sided_names()
    required = ["Pelvis", "Spine", "Neck", "Head"] + [n for n, _ in limbs]
    _require(source, required, "3DHP")
    assignments = {
        Joint3D.PELVIS: source["Pelvis"],
        Joint3D.SPINE: source["Spine"],
        Joint3D.NECK: source["Neck"],
        Joint3D.HEAD: source["Head"],
    }
    for name, joint in limbs:
        assignments[joint] = source[name]
    return _pose_from_named(assignments)


def map_3dpw_joints(source: dict[str, np.ndarray]) -> Pose3D:
    """Map a 3DPW-style table, synthesizing pelvis and spine.

    Pelvis = midpoint of the hips; spine = midpoint of pelvis and neck.
    """
    limbs = _sided_names()
    required = ["Neck", "Head"] + [n for n, _ in limbs]
    _require(source, required, "3DPW")
    left_hip = np.asarray(source["Left hip"], dtype=np.float64)
    right_hip = np.asarray(source["Right hip"], dtype=np.float64)
    neck = np.asarray(source["Neck"], dtype=np.float64)
    pelvis = 0.5 * (left_hip + right_hip)
    spine = 0.5 * (pelvis + neck)
    assignments = {
        Joint3D.PELVIS: pelvis,
        Joint3D.SPINE: spine,
        Joint3D.NECK: neck,
        Joint3D.HEAD: source["Head"],
    }
    for name, joint in limbs:
        assignments[joint] = source[name]
    return _pose_from_named(assignments)


def pose2d_input_vector(pose: Pose2D, include_visibility: bool = True) -> np.ndarray:
    """Flatten a 2D pose to a model input row.

    Layout: [x0, y0, ..., x12, y12] in canonical joint order, followed
    by the 13 visibility flags when ``include_visibility`` is set
    (input width 39, else 26).
    """
    flat = pose.coords.reshape(-1)
    if include_visibility:
        return np.concatenate([flat, pose.visibility.astype(np.float64)])
    return flat.copy()


def visibility_to_3d_mask(visibility_2d: np.ndarray) -> np.ndarray:
    """Lift a 13-joint 2D visibility mask to the 16-joint skeleton.

    Visible 2D joints mark their 3D counterparts visible; pelvis, spine
    and neck (which have no 2D counterpart) are always marked visible
    since they anchor normalization.
    """
    visibility_2d = np.asarray(visibility_2d, dtype=bool)
    if visibility_2d.shape != (NUM_JOINTS_2D,):
        raise ValueError("visibility mask must have shape (13,)")
    mask = np.zeros(NUM_JOINTS_3D, dtype=bool)
    mask[JOINT_2D_TO_3D_INDEX[visibility_2d]] = True
    mask[[Joint3D.PELVIS, Joint3D.SPINE, Joint3D.NECK]] = True
    return mask
