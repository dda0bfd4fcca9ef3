"""Camera augmentation and keypoint occlusion augmentation.

Camera augmentation renders a normalized 3D pose from two random views
to form an anchor/positive 2D pair. Occlusion augmentation synthesizes
visibility masks, either independently per joint or by sampling clique
patterns from an empirical visibility prior: the body decomposes into
six cliques (head; torso; left and right arm/torso; upper legs; lower
legs) that are sampled in a fixed order, each conditioned on joints
already assigned by earlier cliques. Torso joints are never occluded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    DEFAULT_CAMERA_DISTANCE,
    euler_to_rotation,
    normalize_pose2d,
    project_pose,
    rotate_pose3d,
)
from .skeleton import NUM_JOINTS_2D, TORSO_2D_INDEX, Joint2D, Pose2D, Pose3D

PRIOR_FILE_HEADER = "# probpose-visibility-prior v1"

# Clique definitions: name -> canonical 2D joint indices in ascending
# order (which is also the within-clique bit order). Sampling follows
# the list order.
CLIQUES: list[tuple[str, tuple[int, ...]]] = [
    ("head", (int(Joint2D.NOSE),)),
    ("torso", tuple(sorted(int(j) for j in (
        Joint2D.LEFT_SHOULDER, Joint2D.RIGHT_SHOULDER,
        Joint2D.LEFT_HIP, Joint2D.RIGHT_HIP)))),
    ("left_arm", tuple(sorted(int(j) for j in (
        Joint2D.LEFT_WRIST, Joint2D.LEFT_ELBOW,
        Joint2D.LEFT_SHOULDER, Joint2D.LEFT_HIP)))),
    ("right_arm", tuple(sorted(int(j) for j in (
        Joint2D.RIGHT_WRIST, Joint2D.RIGHT_ELBOW,
        Joint2D.RIGHT_SHOULDER, Joint2D.RIGHT_HIP)))),
    ("upper_legs", tuple(sorted(int(j) for j in (
        Joint2D.LEFT_HIP, Joint2D.RIGHT_HIP,
        Joint2D.LEFT_KNEE, Joint2D.RIGHT_KNEE)))),
    ("lower_legs", tuple(sorted(int(j) for j in (
        Joint2D.LEFT_KNEE, Joint2D.RIGHT_KNEE,
        Joint2D.LEFT_ANKLE, Joint2D.RIGHT_ANKLE)))),
]
CLIQUE_NAMES = [name for name, _ in CLIQUES]

_NON_TORSO = np.array(
    [j for j in range(NUM_JOINTS_2D) if j not in set(TORSO_2D_INDEX.tolist())]
)


class PriorFormatError(ValueError):
    """Malformed or non-normalized visibility-prior table."""


def _bits_to_array(bits: str, width: int) -> np.ndarray:
    if len(bits) != width or any(c not in "01" for c in bits):
        raise PriorFormatError(f"bad pattern bits {bits!r} (want {width} of 0/1)")
    return np.frombuffer(bits.encode(), dtype=np.uint8) - ord("0")


def _array_to_bits(arr: np.ndarray) -> str:
    return "".join("1" if v else "0" for v in arr)


@dataclass
class VisibilityPrior:
    """Per-clique visibility-pattern frequencies plus top full patterns.

    ``clique_tables[name]`` maps a pattern-bit string (joint order =
    ascending canonical index within the clique, '1' = visible) to its
    frequency; each table sums to 1. ``full_patterns`` holds the most
    frequent complete 13-bit patterns with their frequencies (a top-k
    subset; may sum to less than 1).
    """

    clique_tables: dict[str, dict[str, float]]
    full_patterns: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name, joints in CLIQUES:
            table = self.clique_tables.get(name)
            if not table:
                raise PriorFormatError(f"missing clique table {name!r}")
            total = 0.0
            for bits, freq in table.items():
                _bits_to_array(bits, len(joints))
                if freq < 0:
                    raise PriorFormatError("negative frequency")
                total += freq
            if abs(total - 1.0) > 1e-9:
                raise PriorFormatError(f"clique {name!r} table sums to {total}")
        torso = self.clique_tables["torso"]
        if abs(torso.get("1111", 0.0) - 1.0) > 1e-9:
            raise PriorFormatError("torso clique must be a point mass on full visibility")
        for bits, freq in self.full_patterns:
            arr = _bits_to_array(bits, NUM_JOINTS_2D)
            if freq < 0:
                raise PriorFormatError("negative full-pattern frequency")
            if not arr[TORSO_2D_INDEX].all():
                raise PriorFormatError("full pattern occludes a torso joint")

    @classmethod
    def point_mass_full_visibility(cls) -> "VisibilityPrior":
        tables = {
            name: {"1" * len(joints): 1.0} for name, joints in CLIQUES
        }
        return cls(tables, [("1" * NUM_JOINTS_2D, 1.0)])


def _clique_arrays(table: dict[str, float], width: int):
    bits = sorted(table.keys())
    patterns = np.stack([_bits_to_array(b, width) for b in bits])
    probs = np.array([table[b] for b in bits], dtype=np.float64)
    return patterns, probs


def structured_visibility_masks(
    n: int, prior: VisibilityPrior, rng: np.random.Generator
) -> tuple[np.ndarray, int]:
    """Sample n visibility masks by clique-ordered conditional sampling.

    Returns (masks (n, 13) bool, fallback_count). When conditioning on
    already-assigned joints empties a clique table's support, the
    remaining joints of that clique fall back to visible.
    """
    assign = np.full((n, NUM_JOINTS_2D), -1, dtype=np.int8)
    assign[:, TORSO_2D_INDEX] = 1  # torso forced visible
    fallbacks = 0
    for name, joints in CLIQUES:
        idx = np.asarray(joints)
        width = len(joints)
        patterns, probs = _clique_arrays(prior.clique_tables[name], width)
        sub = assign[:, idx]  # (n, width); -1 = unassigned
        if (sub >= 0).all():
            continue
        conditions, inverse = np.unique(sub, axis=0, return_inverse=True)
        for ci, cond in enumerate(conditions):
            rows = np.nonzero(inverse == ci)[0]
            fixed = cond >= 0
            if fixed.all():
                continue
            consistent = np.all(patterns[:, fixed] == cond[fixed], axis=1)
            if not consistent.any():
                fallbacks += len(rows)
                filled = cond.copy()
                filled[~fixed] = 1
                assign[np.ix_(rows, idx)] = filled
                continue
            cand = np.nonzero(consistent)[0]
            weights = probs[cand]
            weights = weights / weights.sum()
            draws = rng.choice(len(cand), size=len(rows), p=weights)
            assign[np.ix_(rows, idx)] = patterns[cand[draws]]
    return assign.astype(bool), fallbacks


def structured_dropout(
    pose: Pose2D, prior: VisibilityPrior, rng: np.random.Generator
) -> Pose2D:
    """Apply a sampled structured visibility pattern to a pose.

    The sampled pattern is intersected with the pose's current
    visibility, so joints already invisible stay invisible.
    """
    mask, _ = structured_visibility_masks(1, prior, rng)
    return Pose2D(pose.coords, pose.visibility & mask[0])


def independent_dropout(pose: Pose2D, q: float, rng: np.random.Generator) -> Pose2D:
    """Mask each non-torso joint invisible independently with chance q."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must be in [0, 1]")
    vis = pose.visibility.copy()
    drop = rng.random(_NON_TORSO.size) < q
    vis[_NON_TORSO[drop]] = False
    return Pose2D(pose.coords, vis)


def threshold_visibility(
    pose: Pose2D, confidences: np.ndarray, threshold: float
) -> Pose2D:
    """Mask non-torso joints whose detection confidence is below threshold."""
    confidences = np.asarray(confidences, dtype=np.float64)
    if confidences.shape != (NUM_JOINTS_2D,):
        raise ValueError("need one confidence per 2D joint")
    if np.any((confidences < 0) | (confidences > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    vis = pose.visibility.copy()
    low = confidences < threshold
    low[TORSO_2D_INDEX] = False
    vis[low] = False
    return Pose2D(pose.coords, vis)


def estimate_visibility_prior(
    patterns, top_k: int = 50
) -> VisibilityPrior:
    """Count clique and full-pattern frequencies from a mask stream.

    ``patterns`` is an iterable/array of 13-entry boolean visibility
    masks. Torso joints are forced visible before counting (the torso
    convention). Keeps the ``top_k`` most frequent full patterns.
    """
    arr = np.asarray(list(patterns) if not isinstance(patterns, np.ndarray) else patterns)
    if arr.ndim != 2 or arr.shape[1] != NUM_JOINTS_2D or arr.shape[0] == 0:
        raise ValueError("need a nonempty (N, 13) mask stream")
    arr = arr.astype(bool).copy()
    arr[:, TORSO_2D_INDEX] = True
    n = arr.shape[0]

    tables: dict[str, dict[str, float]] = {}
    for name, joints in CLIQUES:
        sub = arr[:, list(joints)]
        uniq, counts = np.unique(sub, axis=0, return_counts=True)
        tables[name] = {
            _array_to_bits(u): float(c / n) for u, c in zip(uniq, counts)
        }

    uniq, counts = np.unique(arr, axis=0, return_counts=True)
    order = np.argsort(counts)[::-1]
    entries = [(_array_to_bits(uniq[i]), float(counts[i] / n)) for i in order]
    entries.sort(key=lambda e: (-e[1], e[0]))  # deterministic tie-break
    return VisibilityPrior(tables, entries[:top_k])


def enumerate_structured_distribution(prior: VisibilityPrior) -> dict[str, float]:
    """Exact full-pattern distribution of the structured sampler.

    Expands the clique-ordered chain rule over all consistent pattern
    combinations, including the all-visible fallback branch for empty
    conditional support. Feasible because each clique has at most four
    joints (at most 2^13 complete patterns).
    """
    states: dict[tuple, float] = {}
    init = np.full(NUM_JOINTS_2D, -1, dtype=np.int8)
    init[TORSO_2D_INDEX] = 1
    states[tuple(init)] = 1.0
    for name, joints in CLIQUES:
        idx = list(joints)
        width = len(joints)
        patterns, probs = _clique_arrays(prior.clique_tables[name], width)
        next_states: dict[tuple, float] = {}
        for state, prob in states.items():
            arr = np.asarray(state, dtype=np.int8)
            cond = arr[idx]
            fixed = cond >= 0
            if fixed.all():
                next_states[state] = next_states.get(state, 0.0) + prob
                continue
            consistent = np.all(patterns[:, fixed] == cond[fixed], axis=1)
            if not consistent.any():
                filled = arr.copy()
                sub = cond.copy()
                sub[~fixed] = 1
                filled[idx] = sub
                key = tuple(filled)
                next_states[key] = next_states.get(key, 0.0) + prob
                continue
            weights = probs[consistent]
            weights = weights / weights.sum()
            for pattern, w in zip(patterns[consistent], weights):
                if w == 0.0:
                    continue
                filled = arr.copy()
                filled[idx] = pattern
                key = tuple(filled)
                next_states[key] = next_states.get(key, 0.0) + prob * w
        states = next_states
    return {
        _array_to_bits(np.asarray(state)): prob for state, prob in states.items()
    }


def default_visibility_prior(top_k: int = 50) -> VisibilityPrior:
    """Hand-specified synthetic prior shipped with the package.

    These frequencies are plausible stand-ins, NOT measured statistics;
    override with a file-based prior estimated from real data when
    available. The lower-leg table's knee marginals are consistent with
    the upper-leg table so the chain composes cleanly.
    """
    tables = {
        "head": {"1": 0.8, "0": 0.2},
        "torso": {"1111": 1.0},
        # bits: (shoulder, elbow, wrist, hip)
        "left_arm": {"1111": 0.70, "1101": 0.17, "1001": 0.13},
        "right_arm": {"1111": 0.70, "1101": 0.17, "1001": 0.13},
        # bits: (left hip, right hip, left knee, right knee)
        "upper_legs": {"1111": 0.75, "1110": 0.08, "1101": 0.08, "1100": 0.09},
        # bits: (left knee, right knee, left ankle, right ankle)
        "lower_legs": {
            "1111": 0.55, "1110": 0.07, "1101": 0.07, "1100": 0.06,
            "1010": 0.05, "1000": 0.03,
            "0101": 0.05, "0100": 0.03,
            "0000": 0.09,
        },
    }
    prior = VisibilityPrior(tables, [])
    exact = enumerate_structured_distribution(prior)
    entries = sorted(exact.items(), key=lambda e: (-e[1], e[0]))[:top_k]
    prior.full_patterns = [(bits, float(freq)) for bits, freq in entries]
    return prior


def save_visibility_prior(path, prior: VisibilityPrior) -> None:
    """Write a prior as versioned text: clique,<name>,<bits>,<freq> rows."""
    lines = [PRIOR_FILE_HEADER]
    for name, _ in CLIQUES:
        for bits in sorted(prior.clique_tables[name]):
            lines.append(f"clique,{name},{bits},{float(prior.clique_tables[name][bits])!r}")
    for bits, freq in prior.full_patterns:
        lines.append(f"full,{bits},{float(freq)!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_visibility_prior(path) -> VisibilityPrior:
    """Parse a prior file.

    Clique tables must sum to 1; deviations within 1e-6 are
    renormalized, larger ones rejected.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f]
    if not lines or lines[0] != PRIOR_FILE_HEADER:
        raise PriorFormatError(f"missing header line {PRIOR_FILE_HEADER!r}")
    tables: dict[str, dict[str, float]] = {name: {} for name in CLIQUE_NAMES}
    full: list[tuple[str, float]] = []
    widths = {name: len(joints) for name, joints in CLIQUES}
    for ln in lines[1:]:
        if not ln or ln.startswith("#"):
            continue
        parts = ln.split(",")
        if parts[0] == "clique" and len(parts) == 4:
            _, name, bits, freq = parts
            if name not in tables:
                raise PriorFormatError(f"unknown clique {name!r}")
            _bits_to_array(bits, widths[name])
            tables[name][bits] = float(freq)
        elif parts[0] == "full" and len(parts) == 3:
            _, bits, freq = parts
            full.append((bits, float(freq)))
        else:
            raise PriorFormatError(f"unparseable line {ln!r}")
    for name in CLIQUE_NAMES:
        total = sum(tables[name].values())
        if abs(total - 1.0) > 1e-6:
            raise PriorFormatError(
                f"clique {name!r} frequencies sum to {total}, beyond 1e-6 slack"
            )
        if total != 1.0 and total > 0:
            tables[name] = {b: v / total for b, v in tables[name].items()}
    return VisibilityPrior(tables, full)


# ---------------------------------------------------------------------------
# Occlusion strategy selection.
# ---------------------------------------------------------------------------


@dataclass
class OcclusionStrategy:
    """How to synthesize anchor visibility during training.

    ``kind``: one of none / threshold_only / independent / structured.
    Confidence thresholding (when confidences are available) runs
    first; the chosen dropout then masks additional joints.
    """

    kind: str = "none"
    q: float = 0.2
    prior: VisibilityPrior | None = None
    confidence_threshold: float = 0.1

    def __post_init__(self):
        if self.kind not in ("none", "threshold_only", "independent", "structured"):
            raise ValueError(f"unknown occlusion strategy {self.kind!r}")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("q must be in [0, 1]")
        if self.kind == "structured" and self.prior is None:
            self.prior = default_visibility_prior()

    def apply(
        self,
        pose: Pose2D,
        rng: np.random.Generator,
        confidences: np.ndarray | None = None,
    ) -> Pose2D:
        if self.kind == "none":
            return pose
        if confidences is not None:
            pose = threshold_visibility(pose, confidences, self.confidence_threshold)
        if self.kind == "independent":
            pose = independent_dropout(pose, self.q, rng)
        elif self.kind == "structured":
            pose = structured_dropout(pose, self.prior, rng)
        return pose


# ---------------------------------------------------------------------------
# Camera augmentation.
# ---------------------------------------------------------------------------


def sample_view_rotation(
    ranges_deg: tuple[float, float, float], rng: np.random.Generator
):
    """Uniformly sample a view rotation within (azimuth, elevation, roll) ranges."""
    az_r, el_r, roll_r = ranges_deg
    az = rng.uniform(-az_r, az_r) if az_r > 0 else 0.0
    el = rng.uniform(-el_r, el_r) if el_r > 0 else 0.0
    roll = rng.uniform(-roll_r, roll_r) if roll_r > 0 else 0.0
    return euler_to_rotation(az, el, roll)


def render_view(
    pose3d: Pose3D,
    rotation,
    camera_distance: float = DEFAULT_CAMERA_DISTANCE,
    mode: str = "perspective",
) -> Pose2D:
    """Rotate a normalized 3D pose into a view and produce a normalized 2D pose."""
    rotated = rotate_pose3d(pose3d, rotation)
    return normalize_pose2d(project_pose(rotated, camera_distance, mode))


def camera_augment(
    pose3d: Pose3D,
    ranges_deg: tuple[float, float, float],
    rng: np.random.Generator,
    camera_distance: float = DEFAULT_CAMERA_DISTANCE,
    mode: str = "perspective",
) -> tuple[Pose2D, Pose2D]:
    """Render a normalized 3D pose from two independently random views.

    The two normalized 2D outputs form an anchor/positive pair (same
    underlying 3D pose).
    """
    first = sample_view_rotation(ranges_deg, rng)
    second = sample_view_rotation(ranges_deg, rng)
    return (
        render_view(pose3d, first, camera_distance, mode),
        render_view(pose3d, second, camera_distance, mode),
    )
