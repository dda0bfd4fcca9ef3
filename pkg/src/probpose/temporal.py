"""Temporal sequence embeddings: atrous clips and a mid-fusion network.

A clip of T frames (sampled with an atrous rate so it spans roughly
half a second at the source frame rate) is embedded by encoding each
frame with a shared-weight residual FC encoder, concatenating the T
feature vectors, and passing them through one further residual FC block
before the Gaussian heads. Training reuses the single-frame objective
unchanged; two sequences match when the maximum per-frame aligned error
stays within the threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import augmentation as aug
from . import geometry as geo
from .nn import (
    DenseUnit,
    GaussianBatch,
    Linear,
    NetworkConfig,
    ResidualFCBlock,
    StateError,
    _LOGVAR_CLAMP,
)
from .skeleton import Pose2D, Pose3D


@dataclass
class ClipSpec:
    """Clip length and frame stride.

    Rate 4 suits 50 Hz video and rate 2 suits 25 Hz, making a 7-frame
    clip span about half a second either way.
    """

    length: int = 7
    atrous_rate: int = 4

    def __post_init__(self):
        if self.length < 1 or self.length % 2 == 0:
            raise ValueError("clip length must be odd and >= 1")
        if self.atrous_rate < 1:
            raise ValueError("atrous rate must be >= 1")

    @property
    def span(self) -> int:
        """Temporal extent in source frames: (T - 1) * rate."""
        return (self.length - 1) * self.atrous_rate


def clip_frame_indices(num_frames: int, center: int, spec: ClipSpec) -> np.ndarray:
    """Source indices center + rate * (t - (T-1)/2), clamped to bounds."""
    if num_frames < 1:
        raise ValueError("empty sequence")
    half = (spec.length - 1) // 2
    offsets = (np.arange(spec.length) - half) * spec.atrous_rate
    return np.clip(center + offsets, 0, num_frames - 1)


def sample_clip(frames: list, center: int, spec: ClipSpec) -> list:
    """Frames at the clip indices (edge frames repeat at boundaries)."""
    indices = clip_frame_indices(len(frames), center, spec)
    return [frames[i] for i in indices]


@dataclass
class TemporalNetworkConfig:
    """Architecture settings for the sequence embedding network."""

    input_dim: int = 39
    hidden_dim: int = 128
    embedding_dim: int = 32
    clip_length: int = 7
    num_frame_blocks: int = 2
    dropout: float = 0.3
    use_batch_norm: bool = True
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    variance_activation: str = "log"
    dtype: str = "float64"

    def to_dict(self) -> dict:
        return asdict(self)

    def frame_config(self) -> NetworkConfig:
        return NetworkConfig(
            input_dim=self.input_dim,
            hidden_dim=self.hidden_dim,
            embedding_dim=self.embedding_dim,
            num_blocks=self.num_frame_blocks,
            dropout=self.dropout,
            use_batch_norm=self.use_batch_norm,
            bn_momentum=self.bn_momentum,
            bn_eps=self.bn_eps,
            variance_activation=self.variance_activation,
            dtype=self.dtype,
        )


class TemporalNetwork:
    """Mid-fusion sequence embedder with a shared per-frame encoder.

    Per-frame: input unit (n -> h) + ``num_frame_blocks`` residual
    blocks, weights shared across the T slots. The concatenated T*h
    features pass through a fusion unit (T*h -> h) and a further
    residual block before the mean/variance heads.
    """

    kind = "temporal"

    def __init__(self, cfg: TemporalNetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        fc = cfg.frame_config()
        dtype = fc.numpy_dtype
        self.stem = DenseUnit(cfg.input_dim, cfg.hidden_dim, rng, fc, "stem")
        self.frame_blocks = [
            ResidualFCBlock(cfg.hidden_dim, rng, fc, f"frame_block{i}")
            for i in range(cfg.num_frame_blocks)
        ]
        fused = cfg.hidden_dim * cfg.clip_length
        self.fusion = DenseUnit(fused, cfg.hidden_dim, rng, fc, "fusion")
        self.fusion_block = ResidualFCBlock(cfg.hidden_dim, rng, fc, "fusion_block")
        self.mean_head = Linear(cfg.hidden_dim, cfg.embedding_dim, rng, dtype,
                                "mean_head", weight_scale=0.1)
        self.var_head = Linear(cfg.hidden_dim, cfg.embedding_dim, rng, dtype,
                               "var_head", weight_scale=0.1)
        self._cache = None

    def parameters(self):
        params = self.stem.parameters()
        for b in self.frame_blocks:
            params += b.parameters()
        params += self.fusion.parameters() + self.fusion_block.parameters()
        return params + self.mean_head.parameters() + self.var_head.parameters()

    def state(self):
        out = dict(self.stem.state())
        for b in self.frame_blocks:
            out.update(b.state())
        out.update(self.fusion.state())
        out.update(self.fusion_block.state())
        return out

    def forward(self, clips: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> GaussianBatch:
        """Embed (N, T, n) clips into N Gaussian embeddings."""
        cfg = self.cfg
        clips = np.asarray(clips, dtype=cfg.frame_config().numpy_dtype)
        if clips.ndim != 3 or clips.shape[1] != cfg.clip_length or clips.shape[2] != cfg.input_dim:
            raise ValueError(
                f"expected clips (N, {cfg.clip_length}, {cfg.input_dim}), got {clips.shape}"
            )
        n, t, _ = clips.shape
        flat = clips.reshape(n * t, cfg.input_dim)
        h = self.stem.forward(flat, train, rng)
        for b in self.frame_blocks:
            h = b.forward(h, train, rng)
        fused = h.reshape(n, t * cfg.hidden_dim)
        g = self.fusion.forward(fused, train, rng)
        g = self.fusion_block.forward(g, train, rng)
        mean = self.mean_head.forward(g, train)
        raw = self.var_head.forward(g, train)
        if cfg.variance_activation == "log":
            raw = np.clip(raw, -_LOGVAR_CLAMP, _LOGVAR_CLAMP)
            variance = np.exp(raw)
            dvar_draw = variance
        elif cfg.variance_activation == "softplus":
            variance = np.logaddexp(0.0, raw)
            dvar_draw = 1.0 / (1.0 + np.exp(-raw))
        else:
            raise ValueError(f"unknown variance_activation {cfg.variance_activation!r}")
        self._cache = (dvar_draw, n, t) if train else None
        return GaussianBatch(mean, variance)

    def backward(self, dmean: np.ndarray, dvariance: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("backward before train-mode forward")
        dvar_draw, n, t = self._cache
        cfg = self.cfg
        grad = self.mean_head.backward(dmean)
        grad = grad + self.var_head.backward(dvariance * dvar_draw)
        grad = self.fusion_block.backward(grad)
        grad = self.fusion.backward(grad)
        grad = grad.reshape(n * t, cfg.hidden_dim)
        for b in reversed(self.frame_blocks):
            grad = b.backward(grad)
        grad = self.stem.backward(grad)
        return grad.reshape(n, t, cfg.input_dim)

    def meta(self) -> dict:
        return {"kind": self.kind, "config": self.cfg.to_dict()}

    @classmethod
    def from_meta(cls, meta: dict, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(TemporalNetworkConfig(**meta["config"]), rng)


def embed_sequence(net: TemporalNetwork, clip: list[Pose2D], train: bool = False,
                   rng: np.random.Generator | None = None,
                   include_visibility: bool = True):
    """Embed one clip of 2D poses (length must equal the network's T)."""
    from .skeleton import pose2d_input_vector

    if len(clip) != net.cfg.clip_length:
        raise ValueError(
            f"clip length {len(clip)} != network clip length {net.cfg.clip_length}"
        )
    rows = np.stack([pose2d_input_vector(p, include_visibility) for p in clip])
    return net.forward(rows[None], train=train, rng=rng)[0]


def sequence_match_label(a: list[Pose3D], b: list[Pose3D],
                         kappa: float = geo.DEFAULT_KAPPA) -> bool:
    """Sequences match when the max per-frame aligned error is <= kappa."""
    return geo.sequence_np_mpjpe(a, b) <= kappa


def render_clip_view(
    clip3d_norm: list[Pose3D],
    rotation: geo.Rotation3D,
    camera_distance: float = geo.DEFAULT_CAMERA_DISTANCE,
) -> list[Pose2D]:
    """Render all frames of a clip from one shared view."""
    return [aug.render_view(p, rotation, camera_distance) for p in clip3d_norm]


def camera_augment_clip(
    clip3d_norm: list[Pose3D],
    ranges_deg: tuple[float, float, float],
    rng: np.random.Generator,
    camera_distance: float = geo.DEFAULT_CAMERA_DISTANCE,
) -> tuple[list[Pose2D], list[Pose2D]]:
    """Two random views of a 3D clip; each view is shared by all frames."""
    first = aug.sample_view_rotation(ranges_deg, rng)
    second = aug.sample_view_rotation(ranges_deg, rng)
    return (
        render_clip_view(clip3d_norm, first, camera_distance),
        render_clip_view(clip3d_norm, second, camera_distance),
    )
