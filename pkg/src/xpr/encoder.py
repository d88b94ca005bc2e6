"""Local feature extraction for both modalities.

Query branch: a small learnable affine+tanh encoder with a two-branch head
(descriptor projection + per-cell class logits). Map branch: fixed
depth/normal/one-hot hybrid channels from a rendered viewpoint.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .config import Config, make_rng
from .projection import RangeImage, SemanticImage

#: raw query channels: depth, normal xyz, 3 appearance channels
QUERY_CHANNELS = 7


@dataclass(frozen=True)
class LocalFeatureMap:
    values: np.ndarray   # (H, W, C), zero on masked cells
    mask: np.ndarray     # (H, W) bool, True where a real observation exists

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class EncoderParams:
    rgb_proj: np.ndarray   # (QUERY_CHANNELS, C)
    rgb_bias: np.ndarray   # (C,)
    seg_head: np.ndarray   # (C, n_classes)
    seg_bias: np.ndarray   # (n_classes,)
    desc_proj: np.ndarray  # (C, C), identity at init


@dataclass(frozen=True)
class QueryObservation:
    raw: np.ndarray              # (H, W, QUERY_CHANNELS)
    mask: np.ndarray             # (H, W) bool validity
    gt_labels: SemanticImage     # supervision for the segmentation branch


def init_encoder_params(cfg: Config, seed_stream: int = 101) -> EncoderParams:
    c = cfg.feature_dim
    rng = make_rng(cfg.seed, seed_stream)
    return EncoderParams(
        rgb_proj=rng.normal(0.0, 1.0 / np.sqrt(QUERY_CHANNELS), (QUERY_CHANNELS, c)),
        rgb_bias=np.zeros(c),
        seg_head=rng.normal(0.0, 1.0 / np.sqrt(c), (c, cfg.n_classes)),
        seg_bias=np.zeros(cfg.n_classes),
        desc_proj=np.eye(c),
    )


def encode_query_tape(raw_flat: np.ndarray, mask_flat: np.ndarray,
                      rgb_proj: Tensor, rgb_bias: Tensor, seg_head: Tensor,
                      seg_bias: Tensor, desc_proj: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable core: (N, C) masked features and (N, n_classes) logits."""
    x = Tensor(raw_flat)
    m = Tensor(mask_flat[:, None].astype(np.float64))
    h = (x @ rgb_proj + rgb_bias).tanh() * m
    feat = h @ desc_proj
    logits = h @ seg_head + seg_bias
    return feat, logits


def encode_query(obs: QueryObservation, params: EncoderParams
                 ) -> tuple[LocalFeatureMap, SemanticImage, np.ndarray]:
    """Forward pass: feature map, predicted labels, and the raw logit grid.

    Predicted label = argmax over logits (ties to the lowest class id) on
    valid cells, 0 elsewhere.
    """
    if not np.isfinite(obs.raw).all():
        raise ValueError("non-finite query observation")
    h, w, _ = obs.raw.shape
    raw_flat = obs.raw.reshape(h * w, -1)
    mask_flat = obs.mask.reshape(-1)
    feat, logits = encode_query_tape(
        raw_flat, mask_flat,
        Tensor(params.rgb_proj), Tensor(params.rgb_bias),
        Tensor(params.seg_head), Tensor(params.seg_bias),
        Tensor(params.desc_proj))
    logit_grid = logits.data.reshape(h, w, -1)
    pred = np.argmax(logit_grid, axis=2).astype(np.uint16)
    pred[~obs.mask] = 0
    fmap = LocalFeatureMap(feat.data.reshape(h, w, -1), obs.mask.copy())
    return fmap, SemanticImage(pred), logit_grid


def encode_lidar_local(rng_img: RangeImage, sem_img: SemanticImage,
                       cfg: Config) -> LocalFeatureMap:
    """Concatenate normalized depth, normals, and one-hot labels per cell."""
    if rng_img.depth.shape != sem_img.labels.shape:
        raise ValueError("range/semantic image shapes differ")
    h, w = rng_img.depth.shape
    mask = rng_img.depth > 0.0
    values = np.zeros((h, w, cfg.feature_dim))
    values[..., 0] = np.clip(rng_img.depth / cfg.max_range_m, 0.0, 1.0)
    values[..., 1:4] = rng_img.normals
    onehot = np.eye(cfg.n_classes)[sem_img.labels]
    values[..., 4:] = onehot
    values[~mask] = 0.0
    return LocalFeatureMap(values, mask)
