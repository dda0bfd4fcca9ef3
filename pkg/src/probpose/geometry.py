"""Pose normalization, Procrustes alignment and 3D pose similarity.

The central quantity is the normalized, rotation-aligned mean per-joint
position error between two 3D poses: both poses are normalized (pelvis
at origin, torso polyline at unit length), the second pose is rotated
onto the first by orthogonal Procrustes, and the mean joint distance is
taken over a joint mask. Thresholding this error at ``kappa`` yields
the binary matching indicator that drives training labels and retrieval
accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .skeleton import (
    JOINT_2D_TO_3D_INDEX,
    NUM_JOINTS_2D,
    NUM_JOINTS_3D,
    TORSO_2D_INDEX,
    Joint3D,
    Pose2D,
    Pose3D,
)

DEFAULT_KAPPA = 0.1
DEFAULT_CAMERA_DISTANCE = 10.0

# Relative singular-value threshold below which the cross-covariance is
# considered rank-deficient.
_RANK_TOL = 1e-10

_PELVIS = int(Joint3D.PELVIS)
_SPINE = int(Joint3D.SPINE)
_NECK = int(Joint3D.NECK)


class DegeneratePoseError(ValueError):
    """Pose cannot be normalized (zero torso extent)."""


class AlignmentError(ValueError):
    """Procrustes alignment is underdetermined for the given mask."""


class ProjectionError(ValueError):
    """A joint lies at or behind the camera plane."""


@dataclass(frozen=True)
class Rotation3D:
    """A proper rotation (3x3 orthonormal matrix, determinant +1)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        if not np.allclose(m @ m.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > 1e-9:
            raise ValueError("rotation matrix must have determinant +1")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation3D":
        return cls(np.eye(3))

    @classmethod
    def from_euler(cls, azimuth_deg: float, elevation_deg: float, roll_deg: float) -> "Rotation3D":
        return euler_to_rotation(azimuth_deg, elevation_deg, roll_deg)

    def compose(self, other: "Rotation3D") -> "Rotation3D":
        """Rotation equivalent to applying ``other`` first, then self."""
        return Rotation3D(self.matrix @ other.matrix)

    def inverse(self) -> "Rotation3D":
        return Rotation3D(self.matrix.T)


@dataclass(frozen=True)
class MatchResult:
    """Similarity verdict for a 3D pose pair."""

    np_mpjpe: float
    is_match: bool


def euler_to_rotation(azimuth_deg: float, elevation_deg: float, roll_deg: float) -> Rotation3D:
    """Build a rotation from Euler angles in degrees.

    Composition order (applied to a pose): azimuth about the vertical
    y-axis first, then elevation about the x-axis, then roll about the
    z-axis. R = Rz(roll) @ Rx(elevation) @ Ry(azimuth).
    """
    az, el, ro = np.deg2rad([azimuth_deg, elevation_deg, roll_deg])
    ca, sa = np.cos(az), np.sin(az)
    ce, se = np.cos(el), np.sin(el)
    cr, sr = np.cos(ro), np.sin(ro)
    ry = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return Rotation3D(rz @ rx @ ry)


def rotate_pose3d(pose: Pose3D, rotation: Rotation3D) -> Pose3D:
    """Rigidly rotate a 3D pose about the origin."""
    return Pose3D(pose.coords @ rotation.matrix.T, pose.visibility)


def _normalize_coords3d(coords: np.ndarray, scale_mode: str = "segment_sum") -> np.ndarray:
    """Translate pelvis to origin and scale the torso to unit length.

    ``segment_sum`` scales |spine-pelvis| + |neck-spine| to 1;
    ``pelvis_neck`` scales the straight-line pelvis-to-neck distance.
    """
    pelvis = coords[..., _PELVIS, :]
    centered = coords - pelvis[..., None, :]
    if scale_mode == "segment_sum":
        length = np.linalg.norm(
            centered[..., _SPINE, :] - centered[..., _PELVIS, :], axis=-1
        ) + np.linalg.norm(centered[..., _NECK, :] - centered[..., _SPINE, :], axis=-1)
    elif scale_mode == "pelvis_neck":
        length = np.linalg.norm(centered[..., _NECK, :] - centered[..., _PELVIS, :], axis=-1)
    else:
        raise ValueError(f"unknown scale_mode {scale_mode!r}")
    if np.any(length <= 1e-12):
        raise DegeneratePoseError("pelvis-spine-neck extent is zero")
    return centered / length[..., None, None]


def normalize_pose3d(pose: Pose3D, scale_mode: str = "segment_sum") -> Pose3D:
    """Normalize a 3D pose: pelvis at origin, torso polyline length 1.

    Requires pelvis, spine and neck to be visible. Idempotent and
    invariant to similarity transforms of the input by construction.
    """
    if not pose.visibility[[_PELVIS, _SPINE, _NECK]].all():
        raise DegeneratePoseError("pelvis, spine and neck must be visible")
    return Pose3D(_normalize_coords3d(pose.coords, scale_mode), pose.visibility)


def normalize_pose2d(pose: Pose2D) -> Pose2D:
    """Normalize a 2D pose on its torso.

    The hip midpoint moves to the origin and the pose is scaled so the
    maximum pairwise distance among the four torso joints (shoulders
    and hips) is 0.5. Invisible joints stay at (0, 0).
    """
    torso = pose.coords[TORSO_2D_INDEX]
    diffs = torso[:, None, :] - torso[None, :, :]
    max_dist = np.linalg.norm(diffs, axis=-1).max()
    if max_dist <= 1e-12:
        raise DegeneratePoseError("all torso joints coincide")
    hip_left = pose.coords[TORSO_2D_INDEX[2]]
    hip_right = pose.coords[TORSO_2D_INDEX[3]]
    center = 0.5 * (hip_left + hip_right)
    scale = 0.5 / max_dist
    coords = (pose.coords - center) * scale
    coords[~pose.visibility] = 0.0
    return Pose2D(coords, pose.visibility)


def _procrustes_rotation_many(cov: np.ndarray):
    """Optimal proper rotations from stacked 3x3 cross-covariances.

    ``cov[..., k, l] = sum_j source[j, k] * target[j, l]``; the returned
    R maximizes trace(R @ cov), i.e. minimizes ||target - R source||^2,
    with a determinant sign correction that forbids reflections.
    """
    u, s, vt = np.linalg.svd(cov)
    v = np.swapaxes(vt, -1, -2)
    det = np.linalg.det(v @ np.swapaxes(u, -1, -2))
    signs = np.ones_like(s)
    signs[..., -1] = np.sign(det)
    r = (v * signs[..., None, :]) @ np.swapaxes(u, -1, -2)
    return r, s


# Fixed coarse SO(3) grid used as extra starting points when refining
# the alignment under the mean-of-norms error (see _refine_rotations).
_ROTATION_GRID_SIZE = 16
_IRLS_MAX_ITERS = 40
_IRLS_TOL = 1e-9

# The four proper-rotation critical points of the least-squares
# alignment objective: V diag(s1, s2, s3) U^T over sign patterns with
# det +1. The mean-of-norms optimum almost always lives in one of
# their basins; the random grid covers the rare remainder.
_CRITICAL_FLIPS = np.array([
    [1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
])


def _rotation_grid() -> np.ndarray:
    rng = np.random.default_rng(20240501)  # constant: grid is part of the spec'd math
    return random_rotations(_ROTATION_GRID_SIZE, rng)


_ROTATION_GRID = None


def _get_rotation_grid() -> np.ndarray:
    global _ROTATION_GRID
    if _ROTATION_GRID is None:
        _ROTATION_GRID = _rotation_grid()
    return _ROTATION_GRID


def _mean_norm_error(t: np.ndarray, s: np.ndarray, w: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Weighted mean joint distance ||t - R s|| for stacked inputs.

    t, s: (..., J, 3); w: (..., J) weights summing handled by caller;
    r: (..., 3, 3). Returns (...,).
    """
    aligned = np.einsum("...jk,...lk->...jl", s, r)
    d = np.linalg.norm(aligned - t, axis=-1)
    return (d * w).sum(axis=-1) / w.sum(axis=-1)


def _ls_critical_rotations(cov: np.ndarray):
    """The four det-+1 critical rotations of the LS objective.

    ``cov``: (P, 3, 3) cross-covariances. Returns ((P, 4, 3, 3)
    rotations, (P, 3) singular values); candidate 0 is the
    least-squares optimum.
    """
    u, s, vt = np.linalg.svd(cov)
    v = np.swapaxes(vt, -1, -2)
    det = np.linalg.det(v @ np.swapaxes(u, -1, -2))
    base = np.ones((cov.shape[0], 3))
    base[:, 2] = np.sign(det)
    starts = np.empty((cov.shape[0], 4, 3, 3))
    ut = np.swapaxes(u, -1, -2)
    for k, flips in enumerate(_CRITICAL_FLIPS):
        signs = base * flips
        starts[:, k] = (v * signs[:, None, :]) @ ut
    return starts, s


def _irls_rotations(t: np.ndarray, s: np.ndarray, w: np.ndarray, r0: np.ndarray,
                    d0: np.ndarray | None = None, v0: np.ndarray | None = None):
    """Minimize the weighted mean of joint distances over rotations.

    Majorize-minimize iteration on a flat stack of problems: each step
    solves a weighted least-squares Procrustes problem with weights
    w_j / dist_j, which cannot increase the objective. Converged
    problems drop out of the active set. Inputs: t, s (P, J, 3),
    w (P, J), r0 (P, 3, 3); optional precomputed per-joint distances
    d0 and values v0 at r0.
    """
    r = np.array(r0, copy=True)
    w_total = w.sum(axis=-1)
    if d0 is None:
        aligned = np.einsum("pjk,plk->pjl", s, r)
        d0 = np.linalg.norm(aligned - t, axis=-1)
    if v0 is None:
        v0 = (d0 * w).sum(axis=-1) / w_total
    value = np.array(v0, copy=True)
    active = np.arange(t.shape[0])
    d_act = d0
    for _ in range(_IRLS_MAX_ITERS):
        ta, sa, wa = t[active], s[active], w[active]
        weights = wa / np.maximum(d_act, 1e-12)
        cov = np.einsum("pj,pjk,pjl->pkl", weights, sa, ta)
        r_new, _ = _procrustes_rotation_many(cov)
        aligned = np.einsum("pjk,plk->pjl", sa, r_new)
        d_new = np.linalg.norm(aligned - ta, axis=-1)
        new_value = (d_new * wa).sum(axis=-1) / w_total[active]
        improved = new_value < value[active]
        gain = value[active] - new_value
        rows = active[improved]
        r[rows] = r_new[improved]
        value[rows] = new_value[improved]
        cont = improved & (gain >= _IRLS_TOL)
        active = active[cont]
        d_act = d_new[cont]
        if active.size == 0:
            break
    return r, value


def _refine_rotations(t: np.ndarray, s: np.ndarray, w: np.ndarray, cov: np.ndarray):
    """Best rotation under the mean-of-norms error.

    Runs the IRLS descent from each of the four least-squares critical
    rotations and from every rotation of a fixed coarse grid, keeping
    the per-problem best. Distinct basins can sit 50-150 degrees from
    the least-squares optimum with nearly equal minima, so every start
    is polished. Inputs may have arbitrary leading batch shape.
    """
    lead = t.shape[:-2]
    j = t.shape[-2]
    tf = np.ascontiguousarray(t.reshape(-1, j, 3))
    sf = np.ascontiguousarray(s.reshape(-1, j, 3))
    wf = np.ascontiguousarray(w.reshape(-1, j))
    p = tf.shape[0]
    starts, _ = _ls_critical_rotations(cov.reshape(-1, 3, 3))
    best_r, best_v = _irls_rotations(tf, sf, wf, starts[:, 0])
    for k in range(1, starts.shape[1]):
        r_k, v_k = _irls_rotations(tf, sf, wf, starts[:, k])
        better = v_k < best_v
        best_r[better] = r_k[better]
        best_v[better] = v_k[better]
    for rot in _get_rotation_grid():
        r0 = np.broadcast_to(rot, (p, 3, 3))
        r_g, v_g = _irls_rotations(tf, sf, wf, r0)
        better = v_g < best_v
        best_r[better] = r_g[better]
        best_v[better] = v_g[better]
    return best_r.reshape(*lead, 3, 3), best_v.reshape(lead)


def procrustes_align(
    target: Pose3D, source: Pose3D, joint_mask: np.ndarray | None = None
) -> tuple[Rotation3D, Pose3D]:
    """Rotate ``source`` onto ``target`` about the origin.

    Both poses must already be normalized (pelvis-centered). The
    returned proper rotation minimizes the masked mean joint distance:
    the SVD least-squares solution is refined by a monotone reweighted
    iteration so the aligned per-joint error (not its square) is
    optimal, which is what the matching threshold acts on. Raises
    :class:`AlignmentError` when fewer than 3 joints are masked or the
    masked joints are (near) collinear.
    """
    mask = _effective_mask(target, source, joint_mask)
    if mask.sum() < 3:
        raise AlignmentError("need at least 3 masked joints")
    t = target.coords[mask]
    s = source.coords[mask]
    cov = s.T @ t
    _, singular = _procrustes_rotation_many(cov)
    if singular[1] < _RANK_TOL * max(singular[0], 1e-300):
        raise AlignmentError("masked joints are collinear; rotation underdetermined")
    r, _ = _refine_rotations(t, s, np.ones(t.shape[0]), cov)
    rotation = Rotation3D(r)
    return rotation, rotate_pose3d(source, rotation)


def _effective_mask(a: Pose3D, b: Pose3D, joint_mask: np.ndarray | None) -> np.ndarray:
    mask = a.visibility & b.visibility
    if joint_mask is not None:
        joint_mask = np.asarray(joint_mask, dtype=bool)
        if joint_mask.shape != (NUM_JOINTS_3D,):
            raise ValueError("joint_mask must have shape (16,)")
        mask = mask & joint_mask
    return mask


def mpjpe(a: Pose3D, b: Pose3D, joint_mask: np.ndarray | None = None) -> float:
    """Mean Euclidean distance over masked joints."""
    mask = _effective_mask(a, b, joint_mask)
    if not mask.any():
        raise ValueError("empty joint mask")
    return float(np.linalg.norm(a.coords[mask] - b.coords[mask], axis=-1).mean())


def np_mpjpe(
    a: Pose3D,
    b: Pose3D,
    joint_mask: np.ndarray | None = None,
    scale_mode: str = "segment_sum",
) -> float:
    """Normalized, rotation-aligned MPJPE.

    Both poses are normalized, ``b`` is Procrustes-aligned onto ``a``
    over the masked joints, and the masked MPJPE of the aligned pair is
    returned. Invariant to similarity transforms of either argument.
    """
    na = normalize_pose3d(a, scale_mode)
    nb = normalize_pose3d(b, scale_mode)
    _, nb_aligned = procrustes_align(na, nb, joint_mask)
    return mpjpe(na, nb_aligned, joint_mask)


def is_match(
    a: Pose3D,
    b: Pose3D,
    kappa: float = DEFAULT_KAPPA,
    joint_mask: np.ndarray | None = None,
) -> MatchResult:
    """Binary 3D similarity indicator: error <= kappa (inclusive)."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    err = np_mpjpe(a, b, joint_mask)
    return MatchResult(np_mpjpe=err, is_match=err <= kappa)


def sequence_np_mpjpe(a: list[Pose3D], b: list[Pose3D]) -> float:
    """Max over frames of the per-frame aligned error.

    Each frame pair is aligned independently; the maximum reflects the
    requirement that two sequences stay close at every timestamp.
    """
    if len(a) != len(b):
        raise ValueError("sequences must have equal length")
    if len(a) == 0:
        raise ValueError("sequences must be nonempty")
    return max(np_mpjpe(fa, fb) for fa, fb in zip(a, b))


def project_pose(
    pose: Pose3D,
    camera_distance: float = DEFAULT_CAMERA_DISTANCE,
    mode: str = "perspective",
) -> Pose2D:
    """Project a 3D pose to the canonical 13-joint 2D skeleton.

    The camera sits on the +z axis at ``camera_distance`` looking at
    the origin: (x, y, z) -> (x, y) / (camera_distance - z). The 16 3D
    joints map to the 13 2D joints via the skeleton correspondence
    (head -> nose). Orthographic mode simply drops z.
    """
    pts = pose.coords[JOINT_2D_TO_3D_INDEX]
    if mode == "perspective":
        denom = camera_distance - pts[:, 2]
        if np.any(denom <= 0):
            raise ProjectionError("joint at or behind the camera plane")
        coords = pts[:, :2] / denom[:, None]
    elif mode == "orthographic":
        coords = pts[:, :2].copy()
    else:
        raise ValueError(f"unknown projection mode {mode!r}")
    return Pose2D(coords, np.ones(NUM_JOINTS_2D, dtype=bool))


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample n rotation matrices uniformly over SO(3) (via quaternions)."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((n, 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - z * w)
    r[:, 0, 2] = 2 * (x * z + y * w)
    r[:, 1, 0] = 2 * (x * y + z * w)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - x * w)
    r[:, 2, 0] = 2 * (x * z - y * w)
    r[:, 2, 1] = 2 * (y * z + x * w)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


# ---------------------------------------------------------------------------
# Vectorized batch helpers. These operate on raw (N, 16, 3) coordinate
# arrays for the training/evaluation hot paths and are tested against
# the scalar pose API above.
# ---------------------------------------------------------------------------


def normalize_many3d(coords: np.ndarray, scale_mode: str = "segment_sum") -> np.ndarray:
    """Batch version of :func:`normalize_pose3d` on an (N, 16, 3) array."""
    return _normalize_coords3d(np.asarray(coords, dtype=np.float64), scale_mode)


def np_mpjpe_one_to_many(
    a_norm: np.ndarray, b_norm: np.ndarray, joint_mask: np.ndarray | None = None
) -> np.ndarray:
    """Aligned error between one normalized pose and many.

    ``a_norm``: (16, 3) normalized pose; ``b_norm``: (M, 16, 3)
    normalized poses; returns (M,) errors using a shared joint mask.
    """
    if joint_mask is None:
        joint_mask = np.ones(NUM_JOINTS_3D, dtype=bool)
    joint_mask = np.asarray(joint_mask, dtype=bool)
    m = int(joint_mask.sum())
    if m < 3:
        raise AlignmentError("need at least 3 masked joints")
    t = a_norm[joint_mask]  # (m, 3)
    s = b_norm[:, joint_mask, :]  # (M, m, 3)
    cov = np.einsum("njk,jl->nkl", s, t)
    w = np.ones(s.shape[:2])
    _, value = _refine_rotations(np.broadcast_to(t, s.shape), s, w, cov)
    return value


def np_mpjpe_matrix(
    a_norm: np.ndarray,
    b_norm: np.ndarray,
    joint_mask: np.ndarray | None = None,
    row_masks: np.ndarray | None = None,
    chunk: int = 64,
) -> np.ndarray:
    """All-pairs aligned error between two normalized pose sets.

    ``a_norm``: (N, 16, 3); ``b_norm``: (M, 16, 3); returns (N, M).
    ``row_masks`` optionally gives a per-row joint mask (N, 16) used for
    both alignment and error (partial-pose matching); it is combined
    with ``joint_mask`` when both are present. Rows are processed in
    chunks to bound memory.
    """
    a_norm = np.asarray(a_norm, dtype=np.float64)
    b_norm = np.asarray(b_norm, dtype=np.float64)
    n, m_points = a_norm.shape[0], b_norm.shape[0]
    if joint_mask is None:
        joint_mask = np.ones(NUM_JOINTS_3D, dtype=bool)
    joint_mask = np.asarray(joint_mask, dtype=bool)
    if row_masks is None:
        masks = np.broadcast_to(joint_mask, (n, NUM_JOINTS_3D))
    else:
        masks = np.asarray(row_masks, dtype=bool) & joint_mask
    if np.any(masks.sum(axis=1) < 3):
        raise AlignmentError("need at least 3 masked joints in every row")
    out = np.empty((n, m_points))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        w = masks[start:stop].astype(np.float64)  # (c, 16)
        t = a_norm[start:stop]  # (c, 16, 3)
        # cov[c, M, k, l] = sum_j w[c, j] * b[M, j, k] * t[c, j, l]
        tw = t * w[:, :, None]
        cov = np.einsum("mjk,cjl->cmkl", b_norm, tw)
        c = stop - start
        t_full = np.broadcast_to(t[:, None], (c, m_points, NUM_JOINTS_3D, 3))
        s_full = np.broadcast_to(b_norm[None], (c, m_points, NUM_JOINTS_3D, 3))
        w_full = np.broadcast_to(w[:, None, :], (c, m_points, NUM_JOINTS_3D))
        _, value = _refine_rotations(t_full, s_full, w_full, cov)
        out[start:stop] = value
    return out


def np_mpjpe_pairs(
    a_norm: np.ndarray, b_norm: np.ndarray, pair_masks: np.ndarray | None = None
) -> np.ndarray:
    """Aligned error for aligned pairs of normalized poses.

    ``a_norm``/``b_norm``: (P, 16, 3); ``pair_masks``: optional (P, 16)
    boolean joint masks. Returns (P,) errors.
    """
    a_norm = np.asarray(a_norm, dtype=np.float64)
    b_norm = np.asarray(b_norm, dtype=np.float64)
    p = a_norm.shape[0]
    if pair_masks is None:
        w = np.ones((p, NUM_JOINTS_3D))
    else:
        w = np.asarray(pair_masks, dtype=np.float64)
    if p == 0:
        return np.zeros(0)
    tw = a_norm * w[:, :, None]
    cov = np.einsum("pjk,pjl->pkl", b_norm, tw)
    _, value = _refine_rotations(a_norm, b_norm, w, cov)
    return value


# Refinement can only lower the least-squares-aligned error; this is
# the largest decrease we budget for when deciding matches from the
# cheap LS error alone (validated empirically well above observed
# maxima, which sit near 0.05 on random pose pairs).
MATCH_REFINEMENT_BAND = 0.08


def match_pairs(
    a_norm: np.ndarray,
    b_norm: np.ndarray,
    kappa: float = DEFAULT_KAPPA,
    pair_masks: np.ndarray | None = None,
    band: float = MATCH_REFINEMENT_BAND,
) -> np.ndarray:
    """Boolean matching labels for aligned pose pairs (banded).

    ``a_norm``/``b_norm``: (P, 16, 3) normalized poses; ``pair_masks``:
    optional (P, 16) joint masks. Same banding as
    :func:`match_matrix`: only pairs whose least-squares error lands in
    (kappa, kappa + band] get the full multi-start refinement.
    """
    a_norm = np.asarray(a_norm, dtype=np.float64)
    b_norm = np.asarray(b_norm, dtype=np.float64)
    p = a_norm.shape[0]
    if p == 0:
        return np.zeros(0, dtype=bool)
    if pair_masks is None:
        w = np.ones((p, NUM_JOINTS_3D))
    else:
        w = np.asarray(pair_masks, dtype=np.float64)
    if np.any(w.sum(axis=1) < 3):
        raise AlignmentError("need at least 3 masked joints in every pair")
    tw = a_norm * w[:, :, None]
    cov = np.einsum("pjk,pjl->pkl", b_norm, tw)
    r_ls, _ = _procrustes_rotation_many(cov)
    aligned = np.einsum("pjk,plk->pjl", b_norm, r_ls)
    d = np.linalg.norm(aligned - a_norm, axis=-1)
    ls = (d * w).sum(axis=-1) / w.sum(axis=-1)
    match = ls <= kappa
    boundary = np.nonzero((ls > kappa) & (ls <= kappa + band))[0]
    if boundary.size:
        refined = np_mpjpe_pairs(a_norm[boundary], b_norm[boundary], w[boundary])
        match[boundary] = refined <= kappa
    return match


def _ls_error_matrix(a_norm, b_norm, masks, chunk=128):
    """Least-squares-aligned mean joint distance, all pairs (cheap)."""
    n, m_points = a_norm.shape[0], b_norm.shape[0]
    out = np.empty((n, m_points))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        w = masks[start:stop].astype(np.float64)
        t = a_norm[start:stop]
        tw = t * w[:, :, None]
        cov = np.einsum("mjk,cjl->cmkl", b_norm, tw)
        r, _ = _procrustes_rotation_many(cov)
        aligned = np.einsum("mjk,cmlk->cmjl", b_norm, r)
        d = np.linalg.norm(aligned - t[:, None], axis=-1)
        out[start:stop] = (d * w[:, None, :]).sum(axis=-1) / w.sum(axis=1)[:, None]
    return out


def match_matrix(
    a_norm: np.ndarray,
    b_norm: np.ndarray,
    kappa: float = DEFAULT_KAPPA,
    joint_mask: np.ndarray | None = None,
    row_masks: np.ndarray | None = None,
    band: float = MATCH_REFINEMENT_BAND,
    symmetric: bool = False,
) -> np.ndarray:
    """Boolean matching labels (aligned error <= kappa) for all pairs.

    Fast path: pairs whose least-squares-aligned error is already
    within kappa match outright (refinement only lowers the error);
    pairs beyond kappa + band cannot match; only the boundary band gets
    the full multi-start refinement. ``symmetric=True`` (valid when the
    two pose sets are the same and a shared mask applies) refines only
    the upper triangle and mirrors it.
    """
    a_norm = np.asarray(a_norm, dtype=np.float64)
    b_norm = np.asarray(b_norm, dtype=np.float64)
    n = a_norm.shape[0]
    if joint_mask is None:
        joint_mask = np.ones(NUM_JOINTS_3D, dtype=bool)
    joint_mask = np.asarray(joint_mask, dtype=bool)
    if row_masks is None:
        masks = np.broadcast_to(joint_mask, (n, NUM_JOINTS_3D))
    else:
        if symmetric:
            raise ValueError("symmetric mode needs a shared joint mask")
        masks = np.asarray(row_masks, dtype=bool) & joint_mask
    if np.any(masks.sum(axis=1) < 3):
        raise AlignmentError("need at least 3 masked joints in every row")
    ls = _ls_error_matrix(a_norm, b_norm, masks)
    match = ls <= kappa
    boundary = (ls > kappa) & (ls <= kappa + band)
    if symmetric:
        boundary = np.triu(boundary, k=1)
    rows, cols = np.nonzero(boundary)
    if rows.size:
        refined = np_mpjpe_pairs(
            a_norm[rows], b_norm[cols], masks[rows].astype(np.float64)
        )
        match[rows, cols] = refined <= kappa
        if symmetric:
            match[cols, rows] = match[rows, cols]
    if symmetric:
        lower = np.tril((ls > kappa) & (ls <= kappa + band), k=-1)
        lr, lc = np.nonzero(lower)
        match[lr, lc] = match[lc, lr]
    return match


def procrustes_align_2d(target: np.ndarray, source: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal in-plane rotation of 2D source points onto target points.

    Closed form: with M = sum_j s_j t_j^T, the best angle satisfies
    cos t ~ (M00 + M11), sin t ~ (M01 - M10). Returns (R, rotated).
    Accepts stacked inputs (..., J, 2).
    """
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    m = np.einsum("...jk,...jl->...kl", source, target)
    c = m[..., 0, 0] + m[..., 1, 1]
    s = m[..., 0, 1] - m[..., 1, 0]
    norm = np.hypot(c, s)
    norm = np.where(norm < 1e-300, 1.0, norm)
    c, s = c / norm, s / norm
    r = np.stack(
        [np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2
    )
    rotated = np.einsum("...jk,...lk->...jl", source, r)
    return r, rotated


def aligned_mpjpe_2d(target: np.ndarray, source: np.ndarray) -> np.ndarray:
    """Rotation-aligned mean joint distance between normalized 2D poses.

    Used by the raw-keypoint retrieval baseline: both inputs must be
    torso-normalized (J, 2) arrays (or stacks thereof).
    """
    _, rotated = procrustes_align_2d(target, source)
    return np.linalg.norm(rotated - target, axis=-1).mean(axis=-1)
