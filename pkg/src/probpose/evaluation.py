"""Cross-view retrieval evaluation and embedding-space analysis.

Queries from one camera retrieve index entries from a different camera,
ranked by Monte-Carlo matching probability (the retrieval confidence).
A retrieval is accurate when the retrieved 3D groundtruth matches the
query's under the aligned-error threshold, restricted to the query's
visible joints for partial poses. Hit@k averages over ordered camera
pairs. Partial-pose benchmarks come in two flavors: ten targeted
visibility patterns (arms/legs removed) and frequency-weighted sets
drawn from a visibility prior's most common full patterns.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .augmentation import VisibilityPrior
from .nn import GaussianBatch, GaussianEmbedding, sample_batch
from .objective import Calibration, mc_probability_matrix
from .skeleton import NUM_JOINTS_2D, Joint2D, visibility_to_3d_mask

DEFAULT_HIT_KS = (1, 5, 10, 20)


@dataclass
class RetrievalSet:
    """One query-camera / index-camera evaluation pair.

    Groundtruth arrays are normalized (F, 16, 3) coordinates aligned
    with the embedding batches; ``query_visibility`` carries the 2D
    visibility of each query for partial-pose matching.
    """

    query_camera: str
    index_camera: str
    query_embeddings: GaussianBatch
    index_embeddings: GaussianBatch
    query_gt: np.ndarray
    index_gt: np.ndarray
    query_visibility: np.ndarray | None = None

    def __post_init__(self):
        if self.query_camera == self.index_camera:
            raise ValueError("query and index cameras must differ")


@dataclass
class RetrievalReport:
    """Hit@k results plus per-pair breakdown and analysis tables."""

    ks: tuple[int, ...]
    hit_at_k: dict[int, float]
    per_camera_pair: dict[tuple[str, str], dict[int, float]]
    num_queries: int
    confidence_bins: list[tuple[float, float, float, int]] = field(default_factory=list)
    variance_curve: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "hit_at_k": {str(k): v for k, v in self.hit_at_k.items()},
            "per_camera_pair": {
                f"{q}->{i}": {str(k): v for k, v in row.items()}
                for (q, i), row in sorted(self.per_camera_pair.items())
            },
            "num_queries": self.num_queries,
            "confidence_bins": [list(b) for b in self.confidence_bins],
            "variance_curve": [list(v) for v in self.variance_curve],
        }


def retrieval_confidences(
    query_samples: np.ndarray,
    index_samples: np.ndarray,
    cal: Calibration,
) -> np.ndarray:
    """Unclipped MC matching probabilities, (Q, I)."""
    return mc_probability_matrix(query_samples, index_samples, cal, clip=None)


def rank_by_confidence(confidences: np.ndarray, k: int | None = None) -> np.ndarray:
    """Indices sorted by descending confidence; ties break on index id."""
    order = np.argsort(-confidences, axis=-1, kind="stable")
    if k is not None:
        order = order[..., :k]
    return order


def retrieve(
    query: GaussianEmbedding,
    index: GaussianBatch,
    k: int,
    num_samples: int,
    cal: Calibration,
    rng: np.random.Generator,
) -> list[tuple[int, float]]:
    """Top-k index ids with retrieval confidences for one query."""
    if len(index) == 0:
        raise ValueError("empty index")
    qs = sample_batch(GaussianBatch(query.mean[None], query.variance[None]),
                      num_samples, rng)
    zs = sample_batch(index, num_samples, rng)
    conf = retrieval_confidences(qs, zs, cal)[0]
    order = rank_by_confidence(conf, k)
    return [(int(i), float(conf[i])) for i in order]


def hit_at_k(match_topk: np.ndarray, k: int) -> float:
    """Percentage of queries with >= 1 accurate retrieval in the top k.

    ``match_topk``: (Q, max_k) boolean accuracy of the ranked
    retrievals, columns ordered by rank.
    """
    if k < 1 or k > match_topk.shape[1]:
        raise ValueError("k out of range")
    return float(match_topk[:, :k].any(axis=1).mean() * 100.0)


def evaluate_retrieval_set(
    rset: RetrievalSet,
    cal: Calibration,
    kappa: float = geo.DEFAULT_KAPPA,
    ks: tuple[int, ...] = DEFAULT_HIT_KS,
    num_samples: int = 20,
    seed: int = 0,
    index_visibility: np.ndarray | None = None,
) -> dict:
    """Rank one retrieval set and score its top-k accuracy.

    Returns per-k hit rates plus per-query data (top-1 confidence and
    correctness, total variance) for the analysis tables.
    """
    max_k = min(max(ks), len(rset.index_embeddings))
    rng = np.random.default_rng(seed)
    qs = sample_batch(rset.query_embeddings, num_samples, rng)
    zs = sample_batch(rset.index_embeddings, num_samples, rng)
    conf = retrieval_confidences(qs, zs, cal)
    order = rank_by_confidence(conf, max_k)  # (Q, max_k)

    q = order.shape[0]
    rows = np.repeat(np.arange(q), max_k)
    cols = order.reshape(-1)
    if rset.query_visibility is not None:
        masks3d = np.stack([
            visibility_to_3d_mask(v) for v in rset.query_visibility
        ])
        pair_masks = masks3d[rows]
    else:
        pair_masks = None
    if index_visibility is not None:
        index_masks = np.stack([visibility_to_3d_mask(v) for v in index_visibility])
        im = index_masks[cols]
        pair_masks = im if pair_masks is None else (pair_masks & im)
    match = geo.match_pairs(
        rset.query_gt[rows], rset.index_gt[cols], kappa, pair_masks
    ).reshape(q, max_k)

    hits = {k: hit_at_k(match, min(k, max_k)) for k in ks}
    top_conf = conf[np.arange(q), order[:, 0]]
    top5 = min(5, max_k)
    return {
        "hits": hits,
        "match_topk": match,
        "top1_confidence": top_conf,
        "top1_correct": match[:, 0],
        "topk_confidence": conf[np.arange(q)[:, None], order[:, :top5]],
        "topk_correct": match[:, :top5],
        "query_total_variance": rset.query_embeddings.total_variance(),
    }


def aggregate_reports(
    per_pair: dict[tuple[str, str], dict],
    ks: tuple[int, ...] = DEFAULT_HIT_KS,
    bin_edges: np.ndarray | None = None,
    variance_fractions: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
) -> RetrievalReport:
    """Average per-camera-pair results into one report.

    The headline Hit@k is the unweighted mean over ordered camera
    pairs. Confidence bins pool the top-5 retrievals of all pairs;
    the variance curve pools queries and recomputes top-1 accuracy
    after discarding the largest-variance fraction.
    """
    hit = {k: float(np.mean([r["hits"][k] for r in per_pair.values()])) for k in ks}
    num_queries = int(sum(len(r["top1_correct"]) for r in per_pair.values()))

    conf_pool = np.concatenate([r["topk_confidence"].reshape(-1) for r in per_pair.values()])
    correct_pool = np.concatenate([r["topk_correct"].reshape(-1) for r in per_pair.values()])
    bins = confidence_accuracy_bins(conf_pool, correct_pool, bin_edges)

    variances = np.concatenate([r["query_total_variance"] for r in per_pair.values()])
    top1 = np.concatenate([r["top1_correct"] for r in per_pair.values()])
    curve = variance_filter_curve(variances, top1, variance_fractions)

    return RetrievalReport(
        ks=tuple(ks),
        hit_at_k=hit,
        per_camera_pair={pair: dict(r["hits"]) for pair, r in per_pair.items()},
        num_queries=num_queries,
        confidence_bins=bins,
        variance_curve=curve,
    )


def confidence_accuracy_bins(
    confidences: np.ndarray,
    correct: np.ndarray,
    bin_edges: np.ndarray | None = None,
) -> list[tuple[float, float, float, int]]:
    """Mean retrieval accuracy per confidence bin; empty bins omitted."""
    if bin_edges is None:
        bin_edges = np.linspace(0.0, 1.0, 11)
    bin_edges = np.asarray(bin_edges, dtype=np.float64)
    out = []
    for lo, hi in zip(bin_edges[:-1], bin_edges[1:]):
        inside = (confidences >= lo) & (
            (confidences < hi) if hi < bin_edges[-1] else (confidences <= hi)
        )
        count = int(inside.sum())
        if count == 0:
            continue
        out.append((float(lo), float(hi), float(correct[inside].mean() * 100.0), count))
    return out


def variance_filter_curve(
    total_variances: np.ndarray,
    top1_correct: np.ndarray,
    fractions: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
) -> list[tuple[float, float]]:
    """Top-1 accuracy after discarding the largest-variance queries."""
    order = np.argsort(total_variances, kind="stable")  # ascending variance
    n = len(order)
    out = []
    for fraction in fractions:
        keep = n - int(np.floor(fraction * n))
        if keep < 1:
            continue
        kept = order[:keep]
        out.append((float(fraction), float(top1_correct[kept].mean() * 100.0)))
    return out


# ---------------------------------------------------------------------------
# Partial-pose benchmark sets.
# ---------------------------------------------------------------------------

_LEFT_ARM = (Joint2D.LEFT_ELBOW, Joint2D.LEFT_WRIST)
_RIGHT_ARM = (Joint2D.RIGHT_ELBOW, Joint2D.RIGHT_WRIST)
_LEFT_LEG = (Joint2D.LEFT_KNEE, Joint2D.LEFT_ANKLE)
_RIGHT_LEG = (Joint2D.RIGHT_KNEE, Joint2D.RIGHT_ANKLE)


@dataclass(frozen=True)
class OcclusionPattern:
    name: str
    visibility: np.ndarray  # (13,) bool
    weight: float = 1.0


def _pattern(name: str, *joint_groups) -> OcclusionPattern:
    vis = np.ones(NUM_JOINTS_2D, dtype=bool)
    for group in joint_groups:
        for j in group:
            vis[int(j)] = False
    return OcclusionPattern(name, vis)


def build_targeted_occlusion_sets() -> list[OcclusionPattern]:
    """The ten targeted visibility patterns.

    Missing left/right/both arms, left/right/both legs, and the four
    one-arm + one-leg combinations; an arm is elbow+wrist and a leg is
    knee+ankle (shoulders and hips are torso, never occluded). Queries
    take the pattern; index samples stay fully visible.
    """
    return [
        _pattern("left_arm", _LEFT_ARM),
        _pattern("right_arm", _RIGHT_ARM),
        _pattern("both_arms", _LEFT_ARM, _RIGHT_ARM),
        _pattern("left_leg", _LEFT_LEG),
        _pattern("right_leg", _RIGHT_LEG),
        _pattern("both_legs", _LEFT_LEG, _RIGHT_LEG),
        _pattern("left_arm_left_leg", _LEFT_ARM, _LEFT_LEG),
        _pattern("left_arm_right_leg", _LEFT_ARM, _RIGHT_LEG),
        _pattern("right_arm_left_leg", _RIGHT_ARM, _LEFT_LEG),
        _pattern("right_arm_right_leg", _RIGHT_ARM, _RIGHT_LEG),
    ]


def _bits_to_mask(bits: str) -> np.ndarray:
    return np.array([c == "1" for c in bits], dtype=bool)


@dataclass
class DistributionOcclusionSet:
    pattern: OcclusionPattern
    index_visibility_sampler: "IndexVisibilitySampler"


class IndexVisibilitySampler:
    """Draw index visibility patterns covering the query's joints.

    Patterns come from the prior's full-pattern table restricted to
    those whose visible set is a superset of the query's, renormalized.
    Falls back to full visibility when no pattern qualifies.
    """

    def __init__(self, prior: VisibilityPrior, query_visibility: np.ndarray):
        masks = []
        freqs = []
        for bits, freq in prior.full_patterns:
            mask = _bits_to_mask(bits)
            if np.all(mask[query_visibility]) and freq > 0:
                masks.append(mask)
                freqs.append(freq)
        self.fallbacks = 0
        if masks:
            self.masks = np.stack(masks)
            self.probs = np.asarray(freqs) / np.sum(freqs)
        else:
            self.masks = np.ones((1, NUM_JOINTS_2D), dtype=bool)
            self.probs = np.ones(1)
            self.fallbacks = 1

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        draws = rng.choice(len(self.masks), size=n, p=self.probs)
        return self.masks[draws]


def build_distribution_occlusion_sets(
    prior: VisibilityPrior,
) -> list[DistributionOcclusionSet]:
    """Weighted query/index visibility sets from the prior's top patterns."""
    if not prior.full_patterns:
        raise ValueError("prior has no full-pattern table")
    total = sum(freq for _, freq in prior.full_patterns)
    out = []
    for bits, freq in prior.full_patterns:
        vis = _bits_to_mask(bits)
        pattern = OcclusionPattern(f"pattern_{bits}", vis, weight=freq / total)
        out.append(
            DistributionOcclusionSet(pattern, IndexVisibilitySampler(prior, vis))
        )
    return out


def apply_pattern_to_inputs(coords: np.ndarray, visibility: np.ndarray) -> np.ndarray:
    """Zero out invisible joints of normalized (N, 13, 2) coordinates."""
    out = np.array(coords, copy=True)
    out[:, ~visibility] = 0.0
    return out


# ---------------------------------------------------------------------------
# Raw-keypoint retrieval baseline.
# ---------------------------------------------------------------------------


def baseline_2d_scores(
    query_coords: np.ndarray, index_coords: np.ndarray, chunk: int = 64
) -> np.ndarray:
    """Aligned 2D keypoint distance, (Q, I); smaller is better.

    Both inputs must be torso-normalized (·, 13, 2) stacks; each pair
    is rotationally aligned in-plane before the mean joint distance.
    """
    q = query_coords.shape[0]
    out = np.empty((q, index_coords.shape[0]))
    for start in range(0, q, chunk):
        stop = min(start + chunk, q)
        block = query_coords[start:stop][:, None]  # (c, 1, 13, 2)
        out[start:stop] = geo.aligned_mpjpe_2d(block, index_coords[None])
    return out


# ---------------------------------------------------------------------------
# PCA export.
# ---------------------------------------------------------------------------


def pca_project(points: np.ndarray, components: int = 2):
    """Principal-component projection of embedding means.

    Returns (projected (N, components), explained variance ratio per
    component). Component signs are fixed so the largest-magnitude
    loading is positive, keeping output deterministic.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < components + 1:
        raise ValueError("need at least components + 1 samples")
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / (points.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    rank = np.linalg.matrix_rank(cov)
    if rank < components:
        raise ValueError(f"data rank {rank} < requested components {components}")
    basis = eigvecs[:, :components]
    for c in range(components):
        j = np.argmax(np.abs(basis[:, c]))
        if basis[j, c] < 0:
            basis[:, c] = -basis[:, c]
    projected = centered @ basis
    total = eigvals.sum()
    ratio = eigvals[:components] / total if total > 0 else np.zeros(components)
    return projected, ratio
