"""Training loops and evaluation pipelines.

A training batch holds N anchor/positive input pairs: half come from
two dataset cameras observing the same frame ("detected"), half from
projecting the frame's 3D pose under two random rotations (camera
augmentation). Negatives are mined per anchor from the other items'
positives using the 3D matching labels; occlusion training applies a
dropout strategy to every other anchor and judges its negatives on the
anchor's visible joints only.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import augmentation as aug
from . import geometry as geo
from . import nn
from . import temporal as temporal_mod
from .data import FrameIndex
from .evaluation import (
    DEFAULT_HIT_KS,
    RetrievalReport,
    RetrievalSet,
    aggregate_reports,
    baseline_2d_scores,
    evaluate_retrieval_set,
    hit_at_k,
    rank_by_confidence,
)
from .nn import GaussianBatch
from .objective import (
    Calibration,
    TrainingConfig,
    matching_losses_from_samples,
    mine_semi_hard_negatives,
    prior_loss_terms,
)
from .skeleton import NUM_JOINTS_2D, TORSO_2D_INDEX, visibility_to_3d_mask

_HIP_LEFT = int(TORSO_2D_INDEX[2])
_HIP_RIGHT = int(TORSO_2D_INDEX[3])


# ---------------------------------------------------------------------------
# Vectorized rendering (batch versions of the scalar geometry path).
# ---------------------------------------------------------------------------


def normalize2d_batch(coords: np.ndarray) -> np.ndarray:
    """Torso-normalize (..., 13, 2) coordinate stacks."""
    torso = coords[..., TORSO_2D_INDEX, :]
    diffs = torso[..., :, None, :] - torso[..., None, :, :]
    max_dist = np.linalg.norm(diffs, axis=-1).max(axis=(-2, -1))
    if np.any(max_dist <= 1e-12):
        raise geo.DegeneratePoseError("coincident torso joints in batch")
    center = 0.5 * (coords[..., _HIP_LEFT, :] + coords[..., _HIP_RIGHT, :])
    scale = 0.5 / max_dist
    return (coords - center[..., None, :]) * scale[..., None, None]


def project_batch(coords3d: np.ndarray, camera_distance: float) -> np.ndarray:
    """Perspective-project (..., 16, 3) stacks to (..., 13, 2)."""
    from .skeleton import JOINT_2D_TO_3D_INDEX

    pts = coords3d[..., JOINT_2D_TO_3D_INDEX, :]
    denom = camera_distance - pts[..., 2]
    if np.any(denom <= 0):
        raise geo.ProjectionError("joint at or behind the camera plane")
    return pts[..., :2] / denom[..., None]


def render_views_batch(
    gt_norm: np.ndarray,
    rotations: np.ndarray,
    camera_distance: float = geo.DEFAULT_CAMERA_DISTANCE,
) -> np.ndarray:
    """Rotate normalized poses per item and produce normalized 2D views.

    ``gt_norm``: (n, 16, 3) or (n, T, 16, 3); ``rotations``: (n, 3, 3),
    shared across the T frames of a clip when present.
    """
    if gt_norm.ndim == 3:
        rotated = np.einsum("njk,nlk->njl", gt_norm, rotations)
    else:
        rotated = np.einsum("ntjk,nlk->ntjl", gt_norm, rotations)
    return normalize2d_batch(project_batch(rotated, camera_distance))


def sample_view_rotations(
    n: int, ranges_deg: tuple[float, float, float], rng: np.random.Generator
) -> np.ndarray:
    """n rotations with the same angle conventions as the scalar path."""
    out = np.empty((n, 3, 3))
    for i in range(n):
        out[i] = aug.sample_view_rotation(ranges_deg, rng).matrix
    return out


def input_rows(coords: np.ndarray, visibility: np.ndarray, include_mask: bool) -> np.ndarray:
    """Flatten (..., 13, 2) + (..., 13) into model input rows."""
    coords = np.where(visibility[..., None], coords, 0.0)
    flat = coords.reshape(*coords.shape[:-2], NUM_JOINTS_2D * 2)
    if include_mask:
        return np.concatenate([flat, visibility.astype(np.float64)], axis=-1)
    return flat


# ---------------------------------------------------------------------------
# Training sources.
# ---------------------------------------------------------------------------


@dataclass
class TrainSettings:
    """One training run: objective config + schedule + augmentation."""

    config: TrainingConfig = field(default_factory=TrainingConfig)
    network: nn.NetworkConfig = field(default_factory=nn.NetworkConfig)
    steps: int = 1500
    camera_augmentation: bool = True
    occlusion: aug.OcclusionStrategy = field(
        default_factory=lambda: aug.OcclusionStrategy(kind="none")
    )
    include_visibility_mask: bool = True
    camera_distance: float = geo.DEFAULT_CAMERA_DISTANCE
    seed: int = 0
    log_every: int = 50


@dataclass
class FramePoseSource:
    """Training pool: normalized groundtruth plus per-camera 2D views."""

    gt_norm: np.ndarray                 # (F, 16, 3)
    camera_inputs: dict[str, np.ndarray]  # cid -> (F, 13, 2) normalized
    match: np.ndarray                   # (F, F) full-visibility match labels

    @classmethod
    def from_frame_index(cls, index: FrameIndex, kappa: float) -> "FramePoseSource":
        match = geo.match_matrix(index.gt_normalized, index.gt_normalized, kappa=kappa)
        return cls(index.gt_normalized, dict(index.inputs), match)

    @property
    def num_frames(self) -> int:
        return self.gt_norm.shape[0]

    @property
    def camera_ids(self) -> list[str]:
        return sorted(self.camera_inputs)


@dataclass
class TrainResult:
    network: object
    calibration: Calibration
    events: list[dict]
    settings: TrainSettings


def _frame_batch(
    source: FramePoseSource,
    settings: TrainSettings,
    rng: np.random.Generator,
):
    """Assemble one batch of anchor/positive input pairs.

    Returns (anchor_rows, positive_rows, frame_ids, anchor_visibility).
    """
    cfg = settings.config
    n = cfg.batch_size
    f = source.num_frames
    cams = source.camera_ids
    frames = rng.choice(f, size=n, replace=f < n)
    num_projected = n // 2 if settings.camera_augmentation else 0
    num_detected = n - num_projected

    anchor_coords = np.empty((n, NUM_JOINTS_2D, 2))
    positive_coords = np.empty((n, NUM_JOINTS_2D, 2))
    # detected pairs: two distinct dataset cameras of the same frame
    for i in range(num_detected):
        c1, c2 = rng.choice(len(cams), size=2, replace=False)
        anchor_coords[i] = source.camera_inputs[cams[c1]][frames[i]]
        positive_coords[i] = source.camera_inputs[cams[c2]][frames[i]]
    # projected pairs: two random views of the normalized 3D pose
    if num_projected:
        ranges = (
            cfg.azimuth_range_deg,
            cfg.elevation_range_deg,
            cfg.roll_range_deg,
        )
        gt = source.gt_norm[frames[num_detected:]]
        rot_a = sample_view_rotations(num_projected, ranges, rng)
        rot_b = sample_view_rotations(num_projected, ranges, rng)
        anchor_coords[num_detected:] = render_views_batch(gt, rot_a, settings.camera_distance)
        positive_coords[num_detected:] = render_views_batch(gt, rot_b, settings.camera_distance)

    anchor_vis = np.ones((n, NUM_JOINTS_2D), dtype=bool)
    if settings.occlusion.kind != "none":
        # occlude every other anchor (even mix of full and partial)
        if settings.occlusion.kind in ("independent", "threshold_only"):
            if settings.occlusion.kind == "independent":
                drop = rng.random((n, NUM_JOINTS_2D)) < cfg.dropout_q
                drop[:, TORSO_2D_INDEX] = False
                anchor_vis &= ~drop
        else:  # structured
            masks, _ = aug.structured_visibility_masks(n, settings.occlusion.prior, rng)
            anchor_vis &= masks
        anchor_vis[::2] = True  # keep half the anchors fully visible
    return anchor_coords, positive_coords, frames, anchor_vis


def _eligibility(
    source_match: np.ndarray,
    gt_norm: np.ndarray,
    frame_ids: np.ndarray,
    anchor_vis: np.ndarray,
    kappa: float,
) -> np.ndarray:
    """Negative eligibility: candidate j's pose must NOT match anchor i.

    Fully visible anchors look up the precomputed pool labels; occluded
    anchors recompute matching over their visible joints.
    """
    n = len(frame_ids)
    match = source_match[np.ix_(frame_ids, frame_ids)].copy()
    occluded = ~anchor_vis.all(axis=1)
    if occluded.any():
        rows = np.nonzero(occluded)[0]
        masks3d = np.stack([visibility_to_3d_mask(anchor_vis[i]) for i in rows])
        partial = geo.match_matrix(
            gt_norm[frame_ids[rows]], gt_norm[frame_ids], kappa=kappa,
            row_masks=masks3d,
        )
        match[rows] = partial
    eligible = ~match
    eligible[np.arange(n), np.arange(n)] = False
    return eligible


def _train_loop(
    net,
    forward_inputs_fn,
    eligibility_fn,
    settings: TrainSettings,
    rng: np.random.Generator,
) -> TrainResult:
    """Shared optimization loop for frame and temporal models.

    ``forward_inputs_fn(rng) -> (anchor_rows, positive_rows, ids,
    anchor_vis)`` assembles a batch; ``eligibility_fn(ids, anchor_vis)``
    labels candidate negatives.
    """
    cfg = settings.config
    cal = Calibration()
    params = net.parameters() + cal.parameters()
    events: list[dict] = []
    t0 = time.time()
    for step in range(settings.steps):
        anchor_rows, positive_rows, ids, anchor_vis = forward_inputs_fn(rng)
        n = anchor_rows.shape[0]
        x = np.concatenate([anchor_rows, positive_rows], axis=0)
        out = net.forward(x, train=True, rng=rng)
        z, eps = nn.sample_batch(out, cfg.num_samples, rng, return_eps=True)
        za, zp = z[:n], z[n:]
        eligible = eligibility_fn(ids, anchor_vis)
        mined = mine_semi_hard_negatives(za, zp, eligible, cfg, cal)
        valid = mined.negative_index >= 0
        neg_rows = np.where(valid, mined.negative_index, 0)
        zn = zp[neg_rows]

        breakdown, grads = matching_losses_from_samples(
            za, zp, zn, cfg, cal, ratio_valid=valid, with_grads=True
        )
        prior, dmu_prior, dvar_prior = prior_loss_terms(out, with_grads=True)
        total = breakdown.total + cfg.w_prior * prior

        dz = np.zeros_like(z)
        dz[:n] += grads.d_anchor
        dz[n:] += grads.d_positive
        np.add.at(dz, n + neg_rows, grads.d_negative * valid[:, None, None])
        dmean, dvar = nn.sample_gradients(dz, eps, out.variance)
        dmean += cfg.w_prior * dmu_prior
        dvar += cfg.w_prior * dvar_prior

        nn.zero_gradients(params)
        net.backward(dmean, dvar)
        cal.raw_a.grad += grads.d_raw_a
        cal.raw_b.grad += grads.d_b
        nn.adagrad_step(params, cfg.learning_rate)

        if step % settings.log_every == 0 or step == settings.steps - 1:
            events.append({
                "step": step,
                "loss_total": float(total),
                "loss_ratio": float(breakdown.ratio),
                "loss_positive": float(breakdown.positive),
                "loss_prior": float(prior),
                "active_triplets": breakdown.active_triplets,
                "semi_hard": int(mined.semi_hard.sum()),
                "skipped_anchors": mined.num_skipped,
                "calibration_a": cal.a,
                "calibration_b": cal.b,
                "elapsed_s": round(time.time() - t0, 3),
            })
    return TrainResult(net, cal, events, settings)


def train_frame_model(
    index: FrameIndex,
    settings: TrainSettings,
    source: FramePoseSource | None = None,
) -> TrainResult:
    """Train a single-frame embedding model on a multi-view pool."""
    cfg = settings.config
    if source is None:
        source = FramePoseSource.from_frame_index(index, cfg.kappa)
    seed_seq = np.random.SeedSequence(settings.seed)
    init_rng, loop_rng = [np.random.default_rng(s) for s in seed_seq.spawn(2)]
    net_cfg = replace(
        settings.network,
        input_dim=NUM_JOINTS_2D * 2 + (NUM_JOINTS_2D if settings.include_visibility_mask else 0),
        embedding_dim=cfg.embedding_dim,
    )
    net = nn.EmbeddingNetwork(net_cfg, init_rng)

    def batch_fn(rng):
        anchor_coords, positive_coords, ids, anchor_vis = _frame_batch(
            source, settings, rng
        )
        full = np.ones_like(anchor_vis)
        return (
            input_rows(anchor_coords, anchor_vis, settings.include_visibility_mask),
            input_rows(positive_coords, full, settings.include_visibility_mask),
            ids,
            anchor_vis,
        )

    def eligibility_fn(ids, anchor_vis):
        return _eligibility(source.match, source.gt_norm, ids, anchor_vis, cfg.kappa)

    return _train_loop(net, batch_fn, eligibility_fn, settings, loop_rng)


def embed_rows(net, rows: np.ndarray, chunk: int = 2048) -> GaussianBatch:
    """Eval-mode embedding of input rows, chunked for memory."""
    means, variances = [], []
    for start in range(0, rows.shape[0], chunk):
        out = net.forward(rows[start : start + chunk])
        means.append(out.mean)
        variances.append(out.variance)
    return GaussianBatch(np.concatenate(means), np.concatenate(variances))


# ---------------------------------------------------------------------------
# Cross-view retrieval evaluation pipelines.
# ---------------------------------------------------------------------------


@dataclass
class EvalSettings:
    kappa: float = geo.DEFAULT_KAPPA
    ks: tuple[int, ...] = DEFAULT_HIT_KS
    num_samples: int = 20
    max_queries: int = 256
    seed: int = 1234


def _query_subsample(total: int, max_queries: int, rng: np.random.Generator) -> np.ndarray:
    if total <= max_queries:
        return np.arange(total)
    return np.sort(rng.choice(total, size=max_queries, replace=False))


def evaluate_cross_view(
    net,
    cal: Calibration,
    index: FrameIndex,
    cameras: list[str],
    eval_settings: EvalSettings,
    include_mask: bool = True,
    query_visibility: np.ndarray | None = None,
    index_visibility_sampler=None,
) -> RetrievalReport:
    """Hit@k over all ordered camera pairs of a frame pool.

    ``query_visibility`` applies one fixed visibility pattern to every
    query (partial-pose retrieval); index entries stay fully visible
    unless an ``index_visibility_sampler`` draws per-entry patterns.
    """
    rng = np.random.default_rng(eval_settings.seed)
    f = len(index)
    full_vis = np.ones((f, NUM_JOINTS_2D), dtype=bool)

    embeddings: dict[str, GaussianBatch] = {}
    query_embeddings: dict[str, GaussianBatch] = {}
    index_visibility: dict[str, np.ndarray] = {}
    for cid in cameras:
        coords = index.inputs[cid]
        if index_visibility_sampler is not None:
            vis = index_visibility_sampler.sample(f, rng)
        else:
            vis = full_vis
        index_visibility[cid] = vis
        embeddings[cid] = embed_rows(net, input_rows(coords, vis, include_mask))
        if query_visibility is not None:
            qvis = np.broadcast_to(query_visibility, (f, NUM_JOINTS_2D))
            query_embeddings[cid] = embed_rows(
                net, input_rows(coords, qvis, include_mask)
            )
        else:
            query_embeddings[cid] = embeddings[cid]

    per_pair = {}
    for qc in cameras:
        for ic in cameras:
            if qc == ic:
                continue
            q_ids = _query_subsample(f, eval_settings.max_queries, rng)
            qvis = (
                np.broadcast_to(query_visibility, (f, NUM_JOINTS_2D))
                if query_visibility is not None
                else full_vis
            )
            rset = RetrievalSet(
                query_camera=qc,
                index_camera=ic,
                query_embeddings=query_embeddings[qc][q_ids],
                index_embeddings=embeddings[ic],
                query_gt=index.gt_normalized[q_ids],
                index_gt=index.gt_normalized,
                query_visibility=qvis[q_ids],
            )
            per_pair[(qc, ic)] = evaluate_retrieval_set(
                rset,
                cal,
                kappa=eval_settings.kappa,
                ks=eval_settings.ks,
                num_samples=eval_settings.num_samples,
                seed=eval_settings.seed,
                index_visibility=index_visibility[ic],
            )
    return aggregate_reports(per_pair, eval_settings.ks)


# ---------------------------------------------------------------------------
# Clip (temporal) training and sequence retrieval.
# ---------------------------------------------------------------------------


@dataclass
class ClipSource:
    """Pool of atrous-sampled clips with sequence matching labels."""

    gt_norm: np.ndarray                   # (C, T, 16, 3)
    camera_inputs: dict[str, np.ndarray]  # cid -> (C, T, 13, 2)
    match: np.ndarray                     # (C, C) sequence labels
    video_ids: list[str]
    labels: list[str]
    centers: list[int]

    @property
    def num_clips(self) -> int:
        return self.gt_norm.shape[0]

    @property
    def camera_ids(self) -> list[str]:
        return sorted(self.camera_inputs)


def build_clip_source(
    dataset,
    spec: temporal_mod.ClipSpec,
    kappa: float,
    center_stride: int = 4,
) -> ClipSource:
    """Cut every video of a sequence dataset into centered clips.

    Clip centers advance by ``center_stride`` frames; boundary clips
    repeat edge frames. Two clips match when their max per-frame
    aligned error stays within kappa (checked frame by frame).
    """
    videos = dataset.videos()
    if not videos:
        raise ValueError("dataset has no videos")
    gt_clips, video_ids, labels, centers = [], [], [], []
    inputs: dict[str, list] = {}
    for vid in sorted(videos):
        frames = videos[vid]
        by_frame: dict[int, dict] = {}
        for r in frames:
            entry = by_frame.setdefault(r.frame_index, {"gt": None, "views": {}})
            if r.pose3d is not None:
                entry["gt"] = r.pose3d
            entry["views"][r.camera_id] = r.pose2d
        frame_ids = sorted(by_frame)
        length = len(frame_ids)
        gt_stack = geo.normalize_many3d(
            np.stack([by_frame[i]["gt"].coords for i in frame_ids])
        )
        cams = sorted(by_frame[frame_ids[0]]["views"])
        cam_stacks = {
            cid: np.stack([by_frame[i]["views"][cid].coords for i in frame_ids])
            for cid in cams
        }
        label = frames[0].action_label
        for center in range(0, length, center_stride):
            idx = temporal_mod.clip_frame_indices(length, center, spec)
            gt_clips.append(gt_stack[idx])
            for cid in cams:
                inputs.setdefault(cid, []).append(cam_stacks[cid][idx])
            video_ids.append(vid)
            labels.append(label)
            centers.append(center)
    gt_norm = np.stack(gt_clips)
    cam_inputs = {cid: np.stack(rows) for cid, rows in inputs.items()}
    c, t = gt_norm.shape[0], gt_norm.shape[1]
    match = np.ones((c, c), dtype=bool)
    for frame in range(t):
        match &= geo.match_matrix(gt_norm[:, frame], gt_norm[:, frame], kappa=kappa)
    return ClipSource(gt_norm, cam_inputs, match, video_ids, labels, centers)


def train_temporal_model(
    source: ClipSource,
    settings: TrainSettings,
    temporal_cfg: temporal_mod.TemporalNetworkConfig,
) -> TrainResult:
    """Train a mid-fusion sequence model on a clip pool."""
    cfg = settings.config
    seed_seq = np.random.SeedSequence(settings.seed)
    init_rng, loop_rng = [np.random.default_rng(s) for s in seed_seq.spawn(2)]
    t = source.gt_norm.shape[1]
    net_cfg = replace(
        temporal_cfg,
        input_dim=NUM_JOINTS_2D * 2 + (NUM_JOINTS_2D if settings.include_visibility_mask else 0),
        clip_length=t,
    )
    net = temporal_mod.TemporalNetwork(net_cfg, init_rng)
    cams = source.camera_ids
    c = source.num_clips

    def batch_fn(rng):
        n = cfg.batch_size
        clips = rng.choice(c, size=n, replace=c < n)
        num_projected = n // 2 if settings.camera_augmentation else 0
        num_detected = n - num_projected
        anchor = np.empty((n, t, NUM_JOINTS_2D, 2))
        positive = np.empty((n, t, NUM_JOINTS_2D, 2))
        for i in range(num_detected):
            c1, c2 = rng.choice(len(cams), size=2, replace=False)
            anchor[i] = source.camera_inputs[cams[c1]][clips[i]]
            positive[i] = source.camera_inputs[cams[c2]][clips[i]]
        if num_projected:
            ranges = (cfg.azimuth_range_deg, cfg.elevation_range_deg, cfg.roll_range_deg)
            gt = source.gt_norm[clips[num_detected:]]
            rot_a = sample_view_rotations(num_projected, ranges, rng)
            rot_b = sample_view_rotations(num_projected, ranges, rng)
            anchor[num_detected:] = render_views_batch(gt, rot_a, settings.camera_distance)
            positive[num_detected:] = render_views_batch(gt, rot_b, settings.camera_distance)
        vis = np.ones((n, t, NUM_JOINTS_2D), dtype=bool)
        rows_a = input_rows(anchor, vis, settings.include_visibility_mask)
        rows_p = input_rows(positive, vis, settings.include_visibility_mask)
        return rows_a, rows_p, clips, np.ones((n, NUM_JOINTS_2D), dtype=bool)

    def eligibility_fn(ids, anchor_vis):
        n = len(ids)
        eligible = ~source.match[np.ix_(ids, ids)]
        eligible[np.arange(n), np.arange(n)] = False
        return eligible

    return _train_loop(net, batch_fn, eligibility_fn, settings, loop_rng)


def embed_rows_clips(net, clips_rows: np.ndarray, chunk: int = 512) -> GaussianBatch:
    """Eval-mode temporal embedding of (C, T, n) clip rows, chunked."""
    means, variances = [], []
    for start in range(0, clips_rows.shape[0], chunk):
        out = net.forward(clips_rows[start : start + chunk])
        means.append(out.mean)
        variances.append(out.variance)
    return GaussianBatch(np.concatenate(means), np.concatenate(variances))


def embed_clips_stacked(frame_net, clips_rows: np.ndarray) -> GaussianBatch:
    """Stack per-frame embeddings of (C, T, n) clips along features."""
    c, t, n = clips_rows.shape
    flat = embed_rows(frame_net, clips_rows.reshape(c * t, n))
    mean = flat.mean.reshape(c, t * flat.dim)
    var = flat.variance.reshape(c, t * flat.dim)
    return GaussianBatch(mean, var)


def evaluate_sequence_retrieval(
    embedder,
    cal: Calibration,
    source: ClipSource,
    cameras: list[str],
    eval_settings: EvalSettings,
    include_mask: bool = True,
) -> RetrievalReport:
    """Cross-view sequence retrieval over ordered camera pairs.

    ``embedder(rows (C, T, n)) -> GaussianBatch`` may be a temporal
    network wrapper or a frame-embedding stacker; correctness labels
    come from the precomputed sequence matching matrix.
    """
    from .objective import mc_probability_matrix

    rng = np.random.default_rng(eval_settings.seed)
    c = source.num_clips
    vis = np.ones((c, source.gt_norm.shape[1], NUM_JOINTS_2D), dtype=bool)
    embeddings = {
        cid: embedder(input_rows(source.camera_inputs[cid], vis, include_mask))
        for cid in cameras
    }
    per_pair = {}
    for qc in cameras:
        for ic in cameras:
            if qc == ic:
                continue
            q_ids = _query_subsample(c, eval_settings.max_queries, rng)
            pair_rng = np.random.default_rng(eval_settings.seed)
            qs = nn.sample_batch(embeddings[qc][q_ids], eval_settings.num_samples, pair_rng)
            zs = nn.sample_batch(embeddings[ic], eval_settings.num_samples, pair_rng)
            conf = mc_probability_matrix(qs, zs, cal, clip=None)
            max_k = min(max(eval_settings.ks), c)
            order = rank_by_confidence(conf, max_k)
            match = source.match[q_ids[:, None], order]
            hits = {k: hit_at_k(match, min(k, max_k)) for k in eval_settings.ks}
            top5 = min(5, max_k)
            per_pair[(qc, ic)] = {
                "hits": hits,
                "match_topk": match,
                "top1_confidence": conf[np.arange(len(q_ids)), order[:, 0]],
                "top1_correct": match[:, 0],
                "topk_confidence": conf[np.arange(len(q_ids))[:, None], order[:, :top5]],
                "topk_correct": match[:, :top5],
                "query_total_variance": embeddings[qc][q_ids].total_variance(),
            }
    return aggregate_reports(per_pair, eval_settings.ks)


def evaluate_cross_view_baseline(
    index: FrameIndex,
    cameras: list[str],
    eval_settings: EvalSettings,
) -> RetrievalReport:
    """Aligned-raw-2D-keypoint retrieval baseline over camera pairs."""
    rng = np.random.default_rng(eval_settings.seed)
    f = len(index)
    per_pair = {}
    for qc in cameras:
        for ic in cameras:
            if qc == ic:
                continue
            q_ids = _query_subsample(f, eval_settings.max_queries, rng)
            scores = baseline_2d_scores(index.inputs[qc][q_ids], index.inputs[ic])
            max_k = min(max(eval_settings.ks), f)
            order = rank_by_confidence(-scores, max_k)  # ascending distance
            rows = np.repeat(np.arange(len(q_ids)), max_k)
            cols = order.reshape(-1)
            match = geo.match_pairs(
                index.gt_normalized[q_ids][rows],
                index.gt_normalized[cols],
                eval_settings.kappa,
            ).reshape(len(q_ids), max_k)
            hits = {k: hit_at_k(match, min(k, max_k)) for k in eval_settings.ks}
            per_pair[(qc, ic)] = {
                "hits": hits,
                "match_topk": match,
                "top1_confidence": -scores[np.arange(len(q_ids)), order[:, 0]],
                "top1_correct": match[:, 0],
                "topk_confidence": -scores[np.arange(len(q_ids))[:, None], order[:, :5]],
                "topk_correct": match[:, : min(5, max_k)],
                "query_total_variance": np.zeros(len(q_ids)),
            }
    return aggregate_reports(per_pair, eval_settings.ks)
