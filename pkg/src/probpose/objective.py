"""Matching-probability losses, calibration and triplet mining.

The similarity kernel maps an embedding-space distance to a matching
probability p = sigmoid(-a * ||zi - zj|| + b) with trainable scalars
a > 0 and b. For Gaussian embeddings the probability is estimated by
Monte-Carlo over K samples per side (mean over the K^2 sample pairs).
Three losses combine into the training objective:

* triplet ratio loss: hinge on -log p differences with margin log(beta),
* positive pairwise loss: -log p of each anchor/positive pair,
* prior loss: KL divergence of each embedding from the unit Gaussian.

During training the pairwise probabilities are clipped to a fixed
interval for numerical stability; inference-time confidences are not
clipped. Every loss here has a matching hand-written gradient path used
by the trainer and validated by finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import GaussianBatch, GaussianEmbedding, Parameter, sample_batch

DEFAULT_PROB_CLIP = (0.05, 0.95)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Calibration:
    """Trainable kernel scalars; a stays positive via a = exp(raw_a)."""

    def __init__(self, a: float = 1.0, b: float = 0.0):
        if a <= 0:
            raise ValueError("a must be positive")
        self.raw_a = Parameter("calibration.raw_a", np.array([np.log(a)]))
        self.raw_b = Parameter("calibration.b", np.array([float(b)]))

    @property
    def a(self) -> float:
        return float(np.exp(self.raw_a.value[0]))

    @property
    def b(self) -> float:
        return float(self.raw_b.value[0])

    def parameters(self) -> list[Parameter]:
        return [self.raw_a, self.raw_b]


@dataclass
class TrainingConfig:
    """Hyperparameters for embedding training.

    Defaults follow the reference setting: matching threshold 0.1,
    probability ratio margin beta = 2, K = 20 Monte-Carlo samples,
    16-dim embeddings, loss weights (1, 0.005, 0.001), probabilities
    clipped to [0.05, 0.95] during training, Adagrad at 0.02 with batch
    size 256, keypoint dropout chance 0.2, and camera rotation ranges
    of +/-180 (azimuth) and +/-30 degrees (elevation, roll).
    """

    kappa: float = 0.1
    beta: float = 2.0
    num_samples: int = 20
    embedding_dim: int = 16
    w_ratio: float = 1.0
    w_positive: float = 0.005
    w_prior: float = 0.001
    prob_clip: tuple[float, float] = DEFAULT_PROB_CLIP
    batch_size: int = 256
    learning_rate: float = 0.02
    dropout_q: float = 0.2
    azimuth_range_deg: float = 180.0
    elevation_range_deg: float = 30.0
    roll_range_deg: float = 30.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.beta <= 1:
            raise ValueError("beta must exceed 1")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if min(self.w_ratio, self.w_positive, self.w_prior) < 0:
            raise ValueError("loss weights must be nonnegative")
        lo, hi = self.prob_clip
        if not (0.0 < lo < hi < 1.0):
            raise ValueError("prob_clip must satisfy 0 < lo < hi < 1")
        if not 0.0 <= self.dropout_q <= 1.0:
            raise ValueError("dropout_q must be in [0, 1]")

    @property
    def margin(self) -> float:
        """Triplet hinge margin: log(beta)."""
        return float(np.log(self.beta))


def point_match_probability(
    z_i: np.ndarray,
    z_j: np.ndarray,
    cal: Calibration,
    clip: tuple[float, float] | None = None,
) -> np.ndarray | float:
    """Matching probability of two embedding points (or stacks thereof)."""
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    dist = np.linalg.norm(z_i - z_j, axis=-1)
    p = sigmoid(-cal.a * dist + cal.b)
    if clip is not None:
        p = np.clip(p, clip[0], clip[1])
    if p.ndim == 0:
        return float(p)
    return p


def _anchored_mean(p: np.ndarray) -> float:
    """Mean computed as ref + mean(p - ref).

    Algebraically the plain mean, but exact when all entries are equal
    (the zero-variance case must reduce to the point kernel exactly).
    """
    ref = p.flat[0]
    return float(ref + (p - ref).mean())


def mc_probability_from_samples(
    samples_i: np.ndarray,
    samples_j: np.ndarray,
    cal: Calibration,
    clip: tuple[float, float] | None = None,
) -> float:
    """Mean pairwise kernel value over all sample pairs (Ki x Kj)."""
    diff = samples_i[:, None, :] - samples_j[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    p = sigmoid(-cal.a * dist + cal.b)
    if clip is not None:
        p = np.clip(p, clip[0], clip[1])
    return _anchored_mean(p)


def mc_match_probability(
    e_i: GaussianEmbedding,
    e_j: GaussianEmbedding,
    k: int,
    cal: Calibration,
    rng: np.random.Generator,
    clip: tuple[float, float] | None = None,
) -> float:
    """Monte-Carlo matching probability between two Gaussian embeddings."""
    zi = sample_batch(GaussianBatch(e_i.mean[None], e_i.variance[None]), k, rng)[0]
    zj = sample_batch(GaussianBatch(e_j.mean[None], e_j.variance[None]), k, rng)[0]
    return mc_probability_from_samples(zi, zj, cal, clip)


def mc_probability_matrix(
    samples_a: np.ndarray,
    samples_b: np.ndarray,
    cal: Calibration,
    clip: tuple[float, float] | None = None,
) -> np.ndarray:
    """All-pairs MC matching probabilities.

    ``samples_a``: (N, Ka, d); ``samples_b``: (M, Kb, d); returns the
    (N, M) matrix of mean kernel values over the Ka x Kb sample pairs.
    """
    n, ka, d = samples_a.shape
    m, kb, _ = samples_b.shape
    fa = samples_a.reshape(n * ka, d)
    fb = samples_b.reshape(m * kb, d)
    sq = (
        (fa * fa).sum(axis=1)[:, None]
        + (fb * fb).sum(axis=1)[None, :]
        - 2.0 * fa @ fb.T
    )
    dist = np.sqrt(np.maximum(sq, 0.0))
    p = sigmoid(-cal.a * dist + cal.b)
    if clip is not None:
        p = np.clip(p, clip[0], clip[1])
    p = p.reshape(n, ka, m, kb)
    ref = p[:, 0, :, 0]
    return ref + (p - ref[:, None, :, None]).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# Loss forward/backward over frozen samples.
# ---------------------------------------------------------------------------


class _PairTerms:
    """Forward + backward of the MC probability for aligned row pairs.

    ``za``/``zb`` are (N, K, d) sample stacks; row i of each side forms
    K^2 pairs whose clipped kernel values average to P[i].
    """

    def __init__(self, za: np.ndarray, zb: np.ndarray, cal: Calibration,
                 clip: tuple[float, float]):
        self.za, self.zb, self.cal, self.clip = za, zb, cal, clip
        diff = za[:, :, None, :] - zb[:, None, :, :]           # (N, K, K, d)
        dist = np.linalg.norm(diff, axis=-1)                    # (N, K, K)
        s = sigmoid(-cal.a * dist + cal.b)
        self.diff, self.dist, self.s = diff, dist, s
        self.inside = (s > clip[0]) & (s < clip[1])
        p = np.clip(s, clip[0], clip[1])
        ref = p[:, 0, 0]
        self.probability = ref + (p - ref[:, None, None]).mean(axis=(1, 2))

    def backward(self, dprob: np.ndarray):
        """Given dL/dP per row, return (dza, dzb, draw_a, db)."""
        n, k1, k2 = self.s.shape
        g_p = dprob[:, None, None] / (k1 * k2)
        g_s = np.where(self.inside, g_p, 0.0)
        ds = g_s * self.s * (1.0 - self.s)
        a = self.cal.a
        g_dist = ds * (-a)
        draw_a = float((ds * (-self.dist)).sum() * a)
        db = float(ds.sum())
        safe = np.where(self.dist > 0, self.dist, 1.0)
        g_diff = (g_dist / safe)[..., None] * self.diff
        dza = g_diff.sum(axis=2)
        dzb = -g_diff.sum(axis=1)
        return dza, dzb, draw_a, db


@dataclass
class LossBreakdown:
    total: float
    ratio: float
    positive: float
    prior: float
    active_triplets: int = 0


@dataclass
class SampleGradients:
    """d(total)/d(sample) arrays plus calibration gradients."""

    d_anchor: np.ndarray
    d_positive: np.ndarray
    d_negative: np.ndarray | None
    d_raw_a: float
    d_b: float


def prior_loss_terms(batch: GaussianBatch, with_grads: bool = False):
    """Unit-Gaussian KL per embedding: 0.5 * sum(var + mu^2 - 1 - ln var)."""
    mu, var = batch.mean, batch.variance
    loss = 0.5 * float((var + mu * mu - 1.0 - np.log(var)).sum())
    if not with_grads:
        return loss, None, None
    dmu = mu.copy()
    dvar = 0.5 * (1.0 - 1.0 / var)
    return loss, dmu, dvar


def gaussian_prior_loss(embeddings: GaussianBatch, cfg: TrainingConfig | None = None) -> float:
    """Sum of KL divergences from the unit Gaussian over a batch."""
    loss, _, _ = prior_loss_terms(embeddings)
    return loss


def matching_losses_from_samples(
    za: np.ndarray,
    zp: np.ndarray,
    zn: np.ndarray | None,
    cfg: TrainingConfig,
    cal: Calibration,
    ratio_valid: np.ndarray | None = None,
    with_grads: bool = False,
) -> tuple[LossBreakdown, SampleGradients | None]:
    """Ratio + positive losses over frozen sample stacks.

    ``za``/``zp``/``zn`` are (N, K, d) anchor/positive/negative samples;
    ``zn`` may be None (no mined triplets; ratio loss is zero).
    ``ratio_valid`` masks triplets whose anchors had no eligible
    negative. The prior term is handled separately since it acts on
    distribution parameters rather than samples.
    """
    ap = _PairTerms(za, zp, cal, cfg.prob_clip)
    d_ap = -np.log(ap.probability)
    positive = float(d_ap.sum())

    active = None
    an = None
    if zn is not None:
        an = _PairTerms(za, zn, cal, cfg.prob_clip)
        d_an = -np.log(an.probability)
        hinge = d_ap - d_an + cfg.margin
        if ratio_valid is not None:
            hinge = np.where(ratio_valid, hinge, 0.0)
        active = hinge > 0
        ratio = float(np.where(active, hinge, 0.0).sum())
    else:
        ratio = 0.0

    total = cfg.w_ratio * ratio + cfg.w_positive * positive
    breakdown = LossBreakdown(
        total=total,
        ratio=ratio,
        positive=positive,
        prior=0.0,
        active_triplets=int(active.sum()) if active is not None else 0,
    )
    if not with_grads:
        return breakdown, None

    # dL/dD_ap = w_ratio * active + w_positive; dL/dD_an = -w_ratio * active.
    act = active.astype(np.float64) if active is not None else 0.0
    d_dap = cfg.w_ratio * act + cfg.w_positive
    dprob_ap = d_dap * (-1.0 / ap.probability)
    dza, dzp, draw_a, db = ap.backward(dprob_ap)
    d_neg = None
    if an is not None:
        dprob_an = (-cfg.w_ratio * act) * (-1.0 / an.probability)
        dza_n, d_neg, draw_a2, db2 = an.backward(dprob_an)
        dza = dza + dza_n
        draw_a += draw_a2
        db += db2
    grads = SampleGradients(dza, dzp, d_neg, draw_a, db)
    return breakdown, grads


# ---------------------------------------------------------------------------
# Spec-level loss entry points (fresh sampling noise per call).
# ---------------------------------------------------------------------------


def triplet_ratio_loss(
    anchors: GaussianBatch,
    positives: GaussianBatch,
    negatives: GaussianBatch,
    cfg: TrainingConfig,
    cal: Calibration,
    rng: np.random.Generator,
) -> float:
    """Hinge on -log matching-probability differences, summed."""
    za = sample_batch(anchors, cfg.num_samples, rng)
    zp = sample_batch(positives, cfg.num_samples, rng)
    zn = sample_batch(negatives, cfg.num_samples, rng)
    breakdown, _ = matching_losses_from_samples(za, zp, zn, cfg, cal)
    return breakdown.ratio


def positive_pairwise_loss(
    anchors: GaussianBatch,
    positives: GaussianBatch,
    cfg: TrainingConfig,
    cal: Calibration,
    rng: np.random.Generator,
) -> float:
    """Sum over pairs of -log MC matching probability."""
    za = sample_batch(anchors, cfg.num_samples, rng)
    zp = sample_batch(positives, cfg.num_samples, rng)
    breakdown, _ = matching_losses_from_samples(za, zp, None, cfg, cal)
    return breakdown.positive


@dataclass
class TripletBatch:
    """A mined batch ready for the full objective."""

    anchors: GaussianBatch
    positives: GaussianBatch
    negatives: GaussianBatch | None
    ratio_valid: np.ndarray | None = None  # per-anchor: had an eligible negative

    def prior_batch(self) -> GaussianBatch:
        """Embeddings the prior regularizes: every input embedded once.

        Negatives are other items' positives, so anchors + positives
        covers the batch without double counting.
        """
        return GaussianBatch(
            np.concatenate([self.anchors.mean, self.positives.mean]),
            np.concatenate([self.anchors.variance, self.positives.variance]),
        )


def total_loss(
    batch: TripletBatch,
    cfg: TrainingConfig,
    cal: Calibration,
    rng: np.random.Generator,
) -> float:
    """Weighted sum of ratio, positive and prior losses."""
    za = sample_batch(batch.anchors, cfg.num_samples, rng)
    zp = sample_batch(batch.positives, cfg.num_samples, rng)
    zn = None
    if batch.negatives is not None:
        zn = sample_batch(batch.negatives, cfg.num_samples, rng)
    breakdown, _ = matching_losses_from_samples(
        za, zp, zn, cfg, cal, ratio_valid=batch.ratio_valid
    )
    prior = gaussian_prior_loss(batch.prior_batch())
    return breakdown.total + cfg.w_prior * prior


# ---------------------------------------------------------------------------
# Semi-hard negative mining.
# ---------------------------------------------------------------------------


@dataclass
class MiningResult:
    negative_index: np.ndarray  # (N,) candidate index, -1 when skipped
    semi_hard: np.ndarray       # (N,) negative came from the semi-hard band
    num_skipped: int


def mine_semi_hard_negatives(
    anchor_samples: np.ndarray,
    candidate_samples: np.ndarray,
    eligible: np.ndarray,
    cfg: TrainingConfig,
    cal: Calibration,
    positive_index: np.ndarray | None = None,
) -> MiningResult:
    """Pick one negative per anchor from a candidate pool.

    ``eligible[i, j]`` marks candidates that are true negatives for
    anchor i (their 3D poses do not match the anchor's, over the
    anchor's visible joints). The distance kernel D = -log p uses the
    training-clipped MC probability over the given sample stacks.
    Among eligible candidates farther than the positive, the closest
    one is chosen (semi-hard); if none exists, the farthest eligible
    candidate is used as a fallback. Anchors without any eligible
    candidate are skipped. Ties break toward the smallest index.
    """
    n = anchor_samples.shape[0]
    if positive_index is None:
        positive_index = np.arange(n)
    prob = mc_probability_matrix(anchor_samples, candidate_samples, cal, cfg.prob_clip)
    dist = -np.log(prob)  # (N, M)
    d_pos = dist[np.arange(n), positive_index]

    negative_index = np.full(n, -1, dtype=int)
    semi_hard = np.zeros(n, dtype=bool)
    skipped = 0
    big = np.inf
    for i in range(n):
        elig = eligible[i]
        if not elig.any():
            skipped += 1
            continue
        row = dist[i]
        in_band = elig & (row > d_pos[i])
        if in_band.any():
            masked = np.where(in_band, row, big)
            negative_index[i] = int(np.argmin(masked))
            semi_hard[i] = True
        else:
            masked = np.where(elig, row, -big)
            negative_index[i] = int(np.argmax(masked))
    return MiningResult(negative_index, semi_hard, skipped)
