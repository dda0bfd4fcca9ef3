"""End-to-end benchmark pipelines on synthetic data.

Three desk-scale studies, each fully seeded and returning plain-dict
metric tables (bit-for-bit reproducible given the same settings):

* view invariance: models with/without camera augmentation against the
  aligned-raw-keypoint baseline on elevation-shifted held-out cameras;
* occlusion robustness: keypoint-dropout training against a no-dropout
  model on the targeted-occlusion benchmark;
* temporal compactness: a 32-dim sequence model against stacking seven
  16-dim frame embeddings on cross-view sequence retrieval.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import augmentation as aug
from . import data
from . import evaluation as ev
from . import nn
from . import temporal as temporal_mod
from . import training as tr
from .objective import TrainingConfig


def table_digest(tables: dict) -> str:
    """Canonical serialization for reproducibility comparisons."""
    return json.dumps(tables, sort_keys=True)


def _report_table(report: ev.RetrievalReport) -> dict:
    return report.to_dict()


# ---------------------------------------------------------------------------
# View-invariance study.
# ---------------------------------------------------------------------------


@dataclass
class ViewInvarianceSpec:
    """Synthetic cross-view study settings (desk-scale defaults)."""

    num_poses: int = 2200
    num_subjects: int = 8
    train_subjects: tuple[str, ...] = ("S0", "S1", "S2", "S3", "S4", "S5")
    val_subjects: tuple[str, ...] = ("S6", "S7")
    train_camera_count: int = 4
    heldout_camera_count: int = 4
    heldout_elevation_deg: float = 25.0
    heldout_azimuth_offset_deg: float = 45.0
    keypoint_jitter: float = 0.0
    dedup_threshold: float = 0.02
    seed: int = 0
    train: tr.TrainSettings = field(default_factory=lambda: tr.TrainSettings(
        config=TrainingConfig(batch_size=64),
        network=nn.NetworkConfig(hidden_dim=128),
        steps=1200,
    ))
    eval: tr.EvalSettings = field(default_factory=lambda: tr.EvalSettings(max_queries=192))

    def cameras(self) -> tuple[list[data.CameraSpec], list[data.CameraSpec]]:
        train_ring = data.camera_ring(self.train_camera_count, 0.0, prefix="train")
        heldout_ring = data.camera_ring(
            self.heldout_camera_count,
            self.heldout_elevation_deg,
            prefix="held",
            azimuth_offset_deg=self.heldout_azimuth_offset_deg,
        )
        return train_ring, heldout_ring


def build_view_invariance_data(spec: ViewInvarianceSpec):
    """Generate, dedup and split the study dataset."""
    train_ring, heldout_ring = spec.cameras()
    cfg = data.SyntheticConfig(
        num_poses=spec.num_poses,
        num_subjects=spec.num_subjects,
        cameras=train_ring + heldout_ring,
        keypoint_jitter=spec.keypoint_jitter,
        seed=spec.seed,
    )
    dataset = data.dedup_by_np_mpjpe(
        data.generate_synthetic_poses(cfg), spec.dedup_threshold
    )
    train_set, val_set = data.split_by_subject(
        dataset, list(spec.train_subjects), list(spec.val_subjects)
    )
    train_index = data.build_frame_index(train_set)
    # the model must not see held-out cameras during training
    train_cam_ids = [c.camera_id for c in train_ring]
    train_index.inputs = {cid: train_index.inputs[cid] for cid in train_cam_ids}
    val_index = data.build_frame_index(val_set)
    heldout_cam_ids = [c.camera_id for c in heldout_ring]
    return train_index, val_index, train_cam_ids, heldout_cam_ids


def run_view_invariance(spec: ViewInvarianceSpec, include_no_aug: bool = True) -> dict:
    """Train with/without camera augmentation; evaluate held-out views."""
    train_index, val_index, train_cams, heldout_cams = build_view_invariance_data(spec)
    source = tr.FramePoseSource.from_frame_index(train_index, spec.train.config.kappa)

    settings_aug = replace(spec.train, camera_augmentation=True, seed=spec.seed)
    result_aug = tr.train_frame_model(train_index, settings_aug, source)
    report_aug = tr.evaluate_cross_view(
        result_aug.network, result_aug.calibration, val_index, heldout_cams, spec.eval,
        include_mask=settings_aug.include_visibility_mask,
    )

    tables = {
        "heldout_cameras": {"aug": _report_table(report_aug)},
        "num_train_frames": len(train_index),
        "num_val_frames": len(val_index),
    }
    models = {"aug": result_aug}

    baseline = tr.evaluate_cross_view_baseline(val_index, heldout_cams, spec.eval)
    tables["heldout_cameras"]["baseline_2d"] = _report_table(baseline)

    if include_no_aug:
        settings_noaug = replace(spec.train, camera_augmentation=False, seed=spec.seed)
        result_noaug = tr.train_frame_model(train_index, settings_noaug, source)
        report_noaug = tr.evaluate_cross_view(
            result_noaug.network, result_noaug.calibration, val_index, heldout_cams,
            spec.eval, include_mask=settings_noaug.include_visibility_mask,
        )
        tables["heldout_cameras"]["no_aug"] = _report_table(report_noaug)
        models["no_aug"] = result_noaug

    return {"tables": tables, "models": models}


# ---------------------------------------------------------------------------
# Occlusion-robustness study.
# ---------------------------------------------------------------------------


@dataclass
class OcclusionSpec:
    """Targeted-occlusion study settings."""

    num_poses: int = 1600
    num_subjects: int = 8
    train_subjects: tuple[str, ...] = ("S0", "S1", "S2", "S3", "S4", "S5")
    val_subjects: tuple[str, ...] = ("S6", "S7")
    camera_count: int = 4
    dedup_threshold: float = 0.02
    strategy: str = "independent"  # dropout flavor for the robust model
    seed: int = 0
    train: tr.TrainSettings = field(default_factory=lambda: tr.TrainSettings(
        config=TrainingConfig(batch_size=64),
        network=nn.NetworkConfig(hidden_dim=128),
        steps=1200,
    ))
    eval: tr.EvalSettings = field(default_factory=lambda: tr.EvalSettings(max_queries=64))


def build_occlusion_data(spec: OcclusionSpec):
    cfg = data.SyntheticConfig(
        num_poses=spec.num_poses,
        num_subjects=spec.num_subjects,
        cameras=data.camera_ring(spec.camera_count, 0.0, prefix="cam"),
        seed=spec.seed,
    )
    dataset = data.dedup_by_np_mpjpe(
        data.generate_synthetic_poses(cfg), spec.dedup_threshold
    )
    train_set, val_set = data.split_by_subject(
        dataset, list(spec.train_subjects), list(spec.val_subjects)
    )
    cams = sorted(dataset.cameras)
    return data.build_frame_index(train_set), data.build_frame_index(val_set), cams


def targeted_occlusion_eval(
    net, cal, val_index, cameras, eval_settings, include_mask=True
) -> dict:
    """Average Hit@k over the ten targeted visibility patterns."""
    patterns = ev.build_targeted_occlusion_sets()
    per_pattern = {}
    for pattern in patterns:
        report = tr.evaluate_cross_view(
            net, cal, val_index, cameras, eval_settings,
            include_mask=include_mask, query_visibility=pattern.visibility,
        )
        per_pattern[pattern.name] = report.hit_at_k
    ks = eval_settings.ks
    averaged = {
        k: float(np.mean([per_pattern[p][k] for p in per_pattern])) for k in ks
    }
    return {
        "averaged": {str(k): v for k, v in averaged.items()},
        "per_pattern": {p: {str(k): v for k, v in row.items()}
                        for p, row in per_pattern.items()},
    }


def distribution_occlusion_eval(
    net, cal, val_index, cameras, eval_settings,
    prior: aug.VisibilityPrior, include_mask=True,
) -> dict:
    """Frequency-weighted Hit@k over the prior's top visibility patterns."""
    sets = ev.build_distribution_occlusion_sets(prior)
    ks = eval_settings.ks
    weighted = {k: 0.0 for k in ks}
    per_pattern = {}
    for dset in sets:
        report = tr.evaluate_cross_view(
            net, cal, val_index, cameras, eval_settings,
            include_mask=include_mask,
            query_visibility=dset.pattern.visibility,
            index_visibility_sampler=dset.index_visibility_sampler,
        )
        per_pattern[dset.pattern.name] = {
            "weight": dset.pattern.weight,
            "hit_at_k": {str(k): v for k, v in report.hit_at_k.items()},
        }
        for k in ks:
            weighted[k] += dset.pattern.weight * report.hit_at_k[k]
    return {
        "weighted": {str(k): v for k, v in weighted.items()},
        "per_pattern": per_pattern,
    }


def run_occlusion(spec: OcclusionSpec) -> dict:
    """Compare dropout-trained and plain models under occlusion."""
    train_index, val_index, cams = build_occlusion_data(spec)
    source = tr.FramePoseSource.from_frame_index(train_index, spec.train.config.kappa)

    runs = {
        "none": aug.OcclusionStrategy(kind="none"),
        spec.strategy: aug.OcclusionStrategy(
            kind=spec.strategy, q=spec.train.config.dropout_q
        ),
    }
    tables: dict = {"full_visibility": {}, "targeted_occlusion": {}}
    models = {}
    for name, strategy in runs.items():
        settings = replace(spec.train, occlusion=strategy, seed=spec.seed)
        result = tr.train_frame_model(train_index, settings, source)
        models[name] = result
        full = tr.evaluate_cross_view(
            result.network, result.calibration, val_index, cams, spec.eval,
            include_mask=settings.include_visibility_mask,
        )
        tables["full_visibility"][name] = _report_table(full)
        tables["targeted_occlusion"][name] = targeted_occlusion_eval(
            result.network, result.calibration, val_index, cams, spec.eval,
            include_mask=settings.include_visibility_mask,
        )
    return {"tables": tables, "models": models}


# ---------------------------------------------------------------------------
# Temporal-compactness study.
# ---------------------------------------------------------------------------


@dataclass
class TemporalSpec:
    """Sequence retrieval study settings."""

    num_templates: int = 5
    videos_per_template: int = 8
    sequence_length: int = 48
    num_subjects: int = 8
    train_subjects: tuple[str, ...] = ("S0", "S1", "S2", "S3", "S4", "S5")
    val_subjects: tuple[str, ...] = ("S6", "S7")
    camera_count: int = 4
    clip: temporal_mod.ClipSpec = field(
        default_factory=lambda: temporal_mod.ClipSpec(length=7, atrous_rate=2)
    )
    center_stride: int = 3
    temporal_dim: int = 32
    frame_dim: int = 16
    seed: int = 0
    train: tr.TrainSettings = field(default_factory=lambda: tr.TrainSettings(
        config=TrainingConfig(batch_size=48),
        network=nn.NetworkConfig(hidden_dim=128),
        steps=900,
    ))
    eval: tr.EvalSettings = field(default_factory=lambda: tr.EvalSettings(max_queries=128))


def build_temporal_data(spec: TemporalSpec):
    cfg = data.SyntheticConfig(
        num_templates=spec.num_templates,
        videos_per_template=spec.videos_per_template,
        sequence_length=spec.sequence_length,
        num_subjects=spec.num_subjects,
        cameras=data.camera_ring(spec.camera_count, 0.0, prefix="cam"),
        smoothness=1.0,
        speed_warp=1.6,
        seed=spec.seed,
    )
    dataset = data.generate_synthetic_sequences(cfg)
    train_set, val_set = data.split_by_subject(
        dataset, list(spec.train_subjects), list(spec.val_subjects)
    )
    kappa = spec.train.config.kappa
    train_clips = tr.build_clip_source(train_set, spec.clip, kappa, spec.center_stride)
    val_clips = tr.build_clip_source(val_set, spec.clip, kappa, spec.center_stride)
    train_frames = data.build_frame_index(train_set, key_by_video=True)
    cams = sorted(dataset.cameras)
    return train_clips, val_clips, train_frames, cams


def run_temporal(spec: TemporalSpec) -> dict:
    """Temporal model vs stacked frame embeddings on sequence retrieval."""
    train_clips, val_clips, train_frames, cams = build_temporal_data(spec)

    temporal_cfg = temporal_mod.TemporalNetworkConfig(
        hidden_dim=spec.train.network.hidden_dim,
        embedding_dim=spec.temporal_dim,
        clip_length=spec.clip.length,
        dropout=spec.train.network.dropout,
    )
    settings_t = replace(spec.train, seed=spec.seed)
    result_t = tr.train_temporal_model(train_clips, settings_t, temporal_cfg)

    frame_cfg = replace(spec.train.config, embedding_dim=spec.frame_dim)
    settings_f = replace(spec.train, config=frame_cfg, seed=spec.seed + 1)
    result_f = tr.train_frame_model(train_frames, settings_f)

    report_temporal = tr.evaluate_sequence_retrieval(
        lambda rows: tr.embed_rows_clips(result_t.network, rows),
        result_t.calibration, val_clips, cams, spec.eval,
    )
    report_stacked = tr.evaluate_sequence_retrieval(
        lambda rows: tr.embed_clips_stacked(result_f.network, rows),
        result_f.calibration, val_clips, cams, spec.eval,
    )
    tables = {
        "sequence_retrieval": {
            f"temporal_{spec.temporal_dim}d": _report_table(report_temporal),
            f"stacked_{spec.frame_dim}d_x{spec.clip.length}": _report_table(report_stacked),
        },
        "num_train_clips": train_clips.num_clips,
        "num_val_clips": val_clips.num_clips,
    }
    return {"tables": tables,
            "models": {"temporal": result_t, "frame": result_f}}
