"""Embedding-based video tasks: alignment, distance and classification.

Frames of two videos are compared by the negative log of their
Monte-Carlo matching probability, temporally smoothed over paired
atrous windows (kernel 7, rate 3 by default). Dynamic time warping
minimizes the summed frame distance; the mean cost along the optimal
path is the video distance. Because the embedding is chiral while many
actions are side-symmetric, distances take the minimum over the four
original/mirrored combinations. Alignment quality is scored with
Kendall's rank correlation over nearest-neighbor frame matches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import GaussianBatch, sample_batch
from .objective import Calibration, mc_probability_matrix

DEFAULT_ATROUS_KERNEL = (7, 3)  # size, rate


@dataclass(frozen=True)
class Alignment:
    """A monotone DTW path from (0, 0) to (L1-1, L2-1)."""

    path: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.path:
            raise ValueError("empty alignment path")
        for (i0, j0), (i1, j1) in zip(self.path, self.path[1:]):
            if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
                raise ValueError("non-monotone alignment step")


@dataclass
class EmbeddedVideo:
    """Per-frame (or per-clip) embeddings of a video.

    ``mirrored`` holds embeddings of the left/right mirrored frames
    (mirroring is applied to the 2D poses before embedding).
    """

    frames: GaussianBatch
    mirrored: GaussianBatch | None = None
    label: str | None = None
    video_id: str | None = None

    def __len__(self) -> int:
        return len(self.frames)


def atrous_average(matrix: np.ndarray, size: int = 7, rate: int = 3) -> np.ndarray:
    """Average a frame-distance matrix over paired atrous windows.

    Entry (i, j) becomes the mean of (i+o, j+o) for the ``size``
    offsets o in rate * (t - (size-1)/2), indices clamped to bounds.
    """
    if size < 1 or size % 2 == 0:
        raise ValueError("kernel size must be odd and >= 1")
    l1, l2 = matrix.shape
    half = (size - 1) // 2
    out = np.zeros_like(matrix)
    rows = np.arange(l1)
    cols = np.arange(l2)
    for t in range(size):
        o = (t - half) * rate
        ri = np.clip(rows + o, 0, l1 - 1)
        ci = np.clip(cols + o, 0, l2 - 1)
        out += matrix[np.ix_(ri, ci)]
    return out / size


def frame_distance_matrix(
    v1: GaussianBatch,
    v2: GaussianBatch,
    cal: Calibration,
    num_samples: int,
    rng: np.random.Generator,
    kernel: tuple[int, int] | None = DEFAULT_ATROUS_KERNEL,
) -> np.ndarray:
    """-log matching probability between all frame pairs, smoothed."""
    s1 = sample_batch(v1, num_samples, rng)
    s2 = sample_batch(v2, num_samples, rng)
    prob = mc_probability_matrix(s1, s2, cal, clip=None)
    dist = -np.log(np.maximum(prob, 1e-300))
    if kernel is not None:
        dist = atrous_average(dist, kernel[0], kernel[1])
    return dist


def dtw_align(costs: np.ndarray) -> tuple[Alignment, float]:
    """Minimal-total-cost monotone alignment of a cost matrix.

    Steps are (1,0), (0,1), (1,1). Ties during traceback prefer the
    diagonal step, then the vertical (first-sequence) step. Returns the
    alignment and the mean cost along it (total / path length).
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.size == 0:
        raise ValueError("cost matrix must be nonempty and 2-D")
    l1, l2 = costs.shape
    acc = np.full((l1, l2), np.inf)
    acc[0, 0] = costs[0, 0]
    for i in range(l1):
        for j in range(l2):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            acc[i, j] = costs[i, j] + best
    path = [(l1 - 1, l2 - 1)]
    i, j = l1 - 1, l2 - 1
    while (i, j) != (0, 0):
        candidates = []
        if i > 0 and j > 0:
            candidates.append((acc[i - 1, j - 1], 0, (i - 1, j - 1)))
        if i > 0:
            candidates.append((acc[i - 1, j], 1, (i - 1, j)))
        if j > 0:
            candidates.append((acc[i, j - 1], 2, (i, j - 1)))
        _, _, (i, j) = min(candidates, key=lambda c: (c[0], c[1]))
        path.append((i, j))
    path.reverse()
    total = float(acc[l1 - 1, l2 - 1])
    return Alignment(tuple(path)), total / len(path)


def video_distance(
    v1: EmbeddedVideo,
    v2: EmbeddedVideo,
    cal: Calibration,
    num_samples: int = 20,
    seed: int = 0,
    kernel: tuple[int, int] | None = DEFAULT_ATROUS_KERNEL,
) -> float:
    """DTW video distance, minimized over mirror combinations.

    All four original/mirrored pairings are tried when mirrored
    embeddings are present (actions can be performed with either body
    side); samples are drawn once per call from a seeded generator.
    """
    rng = np.random.default_rng(seed)
    variants1 = [v1.frames] + ([v1.mirrored] if v1.mirrored is not None else [])
    variants2 = [v2.frames] + ([v2.mirrored] if v2.mirrored is not None else [])
    samples1 = [sample_batch(b, num_samples, rng) for b in variants1]
    samples2 = [sample_batch(b, num_samples, rng) for b in variants2]
    best = np.inf
    for s1 in samples1:
        for s2 in samples2:
            prob = mc_probability_matrix(s1, s2, cal, clip=None)
            dist = -np.log(np.maximum(prob, 1e-300))
            if kernel is not None:
                dist = atrous_average(dist, kernel[0], kernel[1])
            _, mean_cost = dtw_align(dist)
            best = min(best, mean_cost)
    return float(best)


def classify_action(
    query: EmbeddedVideo,
    index: list[EmbeddedVideo],
    cal: Calibration,
    num_samples: int = 20,
    seed: int = 0,
    kernel: tuple[int, int] | None = DEFAULT_ATROUS_KERNEL,
) -> str:
    """Label of the nearest index video; ties take the smallest id."""
    if not index:
        raise ValueError("empty labeled index")
    best_label = None
    best = np.inf
    for entry in index:
        d = video_distance(query, entry, cal, num_samples, seed, kernel)
        if d < best:
            best = d
            best_label = entry.label
    return best_label


def kendall_tau_a(matched_indices: np.ndarray) -> float:
    """Tau-a rank correlation of a matched-index sequence vs frame order.

    Pairs (t1 < t2) are concordant when m[t1] < m[t2], discordant when
    m[t1] > m[t2]; ties count as neither. Denominator n(n-1)/2.
    """
    m = np.asarray(matched_indices)
    n = len(m)
    if n < 2:
        raise ValueError("need at least 2 frames")
    diff = m[None, :] - m[:, None]
    upper = np.triu_indices(n, k=1)
    concordant = int((diff[upper] > 0).sum())
    discordant = int((diff[upper] < 0).sum())
    return (concordant - discordant) / (n * (n - 1) / 2)


def nearest_frame_indices(
    v1: GaussianBatch,
    v2: GaussianBatch,
    cal: Calibration,
    num_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """For each frame of v1, the v2 frame with maximal confidence."""
    s1 = sample_batch(v1, num_samples, rng)
    s2 = sample_batch(v2, num_samples, rng)
    conf = mc_probability_matrix(s1, s2, cal, clip=None)
    return conf.argmax(axis=1)


def kendalls_tau_alignment(
    v1: EmbeddedVideo,
    v2: EmbeddedVideo,
    cal: Calibration,
    num_samples: int = 20,
    seed: int = 0,
) -> float:
    """Alignment quality via nearest-neighbor frame matching.

    Matches each v1 frame to its most confident v2 frame and scores the
    matched indices with tau-a; 1 means perfectly order-preserving.
    When v2 has mirrored embeddings, the larger of the original and
    mirrored taus is returned.
    """
    if len(v1) < 2 or len(v2) < 2:
        raise ValueError("videos must have at least 2 frames")
    taus = []
    variants = [v2.frames] + ([v2.mirrored] if v2.mirrored is not None else [])
    for variant in variants:
        rng = np.random.default_rng(seed)
        matched = nearest_frame_indices(v1.frames, variant, cal, num_samples, rng)
        taus.append(kendall_tau_a(matched))
    return float(max(taus))
