"""In-cabin stream: a compact 3D residual CNN over 16-frame driver clips.

A stem convolution, four bottleneck stages with a doubling channel plan,
global average pooling, and a linear projection produce a fixed-length
feature vector; a classification head sits on top for the training phase
and the inside-only evaluation path. Spatial augmentation (scale, crop
biased toward the driver side, horizontal flip with label mirroring) and
per-slice temporal sampling follow the training protocol.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import INSIDE_CLIP_LEN, mirror_label
from .errors import ConfigError, DataError, DimensionError
from .flow import resize_bilinear
from .nn import BatchNorm, Conv3d, Dense, Module, dropout
from .optim import Sgd, SgdConfig
from .tensor import Tensor, cross_entropy, relu, softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Inside3dConfig:
    """Network geometry. The desk default is deliberately small; the
    full-depth variant uses block_counts (3,4,6,3) with base 64."""

    block_counts: tuple[int, ...] = (1, 1, 1, 1)
    base_channels: int = 8
    feature_dim: int = 2048
    dropout_rate: float = 0.5
    n_classes: int = 5
    in_channels: int = 3
    stem_kernel: tuple[int, int, int] = (3, 7, 7)
    stem_stride: tuple[int, int, int] = (1, 2, 2)
    stage_strides: tuple[tuple[int, int, int], ...] = ((1, 1, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2))
    bottleneck_reduction: int = 4

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be positive, got {self.feature_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout must lie in [0,1), got {self.dropout_rate}")
        if len(self.block_counts) != len(self.stage_strides):
            raise ConfigError("one stride per stage required")
        if min(self.block_counts) < 1 or self.base_channels < 1:
            raise ConfigError("block counts and base channels must be positive")

    def stage_widths(self) -> list[int]:
        return [self.base_channels * (2 ** i) for i in range(len(self.block_counts))]


@dataclass
class Clip3D:
    """Canonical driver clip: [3, 16, 112, 112] values in [0,1]."""

    data: np.ndarray
    FRAMES = 16
    SIZE = 112

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        expect = (3, self.FRAMES, self.SIZE, self.SIZE)
        if self.data.shape != expect:
            raise DimensionError(f"clip shape {self.data.shape}, expected {expect}")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise DataError("clip values must lie in [0,1]")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Spatial and temporal training augmentation.

    The crop window center is drawn from the driver-side portion of the
    frame (the right ``side_fraction`` of the width by default) with
    uniform jitter, after a random rescale; horizontal flips always mirror
    direction labels.
    """

    crop_size: tuple[int, int] = (112, 112)
    scale_range: tuple[float, float] = (0.8, 1.2)
    hflip_prob: float = 0.5
    driver_side: str = "right"
    side_fraction: float = 0.6
    center_jitter: float = 0.1

    def __post_init__(self):
        if self.driver_side not in ("left", "right"):
            raise ConfigError(f"driver_side must be left or right, got {self.driver_side}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("hflip_prob must lie in [0,1]")


def sample_slots(lo: int, hi: int, n: int, mode: str, rng=None) -> list[int]:
    """n indices from [lo, hi): one per equal slice (slice center in eval,
    uniform within the slice in train); short ranges repeat the last index."""
    span = hi - lo
    if span < 1:
        raise DataError(f"empty index range [{lo}, {hi})")
    if span < n:
        idx = list(range(lo, hi))
        return idx + [hi - 1] * (n - len(idx))
    edges = lo + np.floor(np.arange(n + 1) * span / n).astype(int)
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        b = max(b, a + 1)
        out.append(int(rng.integers(a, b)) if mode == "train" else int((a + b - 1) // 2))
    return out


def _crop_origin(h: int, w: int, ch: int, cw: int, policy: AugmentationPolicy,
                 mode: str, rng=None) -> tuple[int, int]:
    max_y, max_x = h - ch, w - cw
    if mode == "eval":
        return max_y // 2, max_x // 2
    lo_frac = 1.0 - policy.side_fraction if policy.driver_side == "right" else 0.0
    hi_frac = 1.0 if policy.driver_side == "right" else policy.side_fraction
    cx = rng.uniform(lo_frac, hi_frac) * w + rng.uniform(-policy.center_jitter,
                                                         policy.center_jitter) * w
    cy = rng.uniform(0.0, 1.0) * h
    oy = int(np.clip(round(cy - ch / 2), 0, max_y))
    ox = int(np.clip(round(cx - cw / 2), 0, max_x))
    return oy, ox


def prepare_clip(frames: np.ndarray, policy: AugmentationPolicy, mode: str,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, bool]:
    """Turn a grayscale sequence [T,H,W] into a [3,16,ch,cw] clip.

    Applies per-slice temporal sampling, then (train mode) random scale,
    driver-side-biased crop, and a possible horizontal flip. Returns the
    clip and whether it was flipped (the caller mirrors the label).
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be train or eval, got {mode!r}")
    if mode == "train" and rng is None:
        raise ConfigError("train-mode preparation needs an rng")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise DimensionError(f"expected grayscale [T,H,W], got {frames.shape}")
    idx = sample_slots(0, frames.shape[0], INSIDE_CLIP_LEN, mode, rng)
    clip = frames[idx]

    ch, cw = policy.crop_size
    if mode == "train":
        scale = rng.uniform(*policy.scale_range)
        th = max(int(round(frames.shape[1] * scale)), ch)
        tw = max(int(round(frames.shape[2] * scale)), cw)
    else:
        th, tw = max(frames.shape[1], ch), max(frames.shape[2], cw)
    if (th, tw) != clip.shape[1:]:
        clip = np.stack([resize_bilinear(f, th, tw) for f in clip])

    oy, ox = _crop_origin(th, tw, ch, cw, policy, mode, rng)
    clip = clip[:, oy:oy + ch, ox:ox + cw]

    flipped = mode == "train" and bool(rng.random() < policy.hflip_prob)
    if flipped:
        clip = clip[:, :, ::-1]
    clip = np.clip(clip, 0.0, 1.0)
    return np.repeat(clip[None], 3, axis=0).copy(), flipped


class Bottleneck3d(Module):
    """1x1x1 reduce -> 3x3x3 -> 1x1x1 expand, BN after each conv, ReLU
    after the first two and after the shortcut addition."""

    def __init__(self, in_channels: int, width: int, stride: tuple[int, int, int],
                 reduction: int, rng: np.random.Generator):
        mid = max(width // reduction, 1)
        one = (1, 1, 1)
        self.conv_reduce = Conv3d(in_channels, mid, one, one, (0, 0, 0), rng)
        self.bn_reduce = BatchNorm(mid, feature_ndim=4)
        self.conv_spatial = Conv3d(mid, mid, (3, 3, 3), stride, (1, 1, 1), rng)
        self.bn_spatial = BatchNorm(mid, feature_ndim=4)
        self.conv_expand = Conv3d(mid, width, one, one, (0, 0, 0), rng)
        self.bn_expand = BatchNorm(width, feature_ndim=4)
        if in_channels != width or stride != one:
            self.proj = Conv3d(in_channels, width, one, stride, (0, 0, 0), rng)
            self.bn_proj = BatchNorm(width, feature_ndim=4)
        else:
            self.proj = None
            self.bn_proj = None

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        out = relu(self.bn_reduce(self.conv_reduce(x), mode))
        out = relu(self.bn_spatial(self.conv_spatial(out), mode))
        out = self.bn_expand(self.conv_expand(out), mode)
        shortcut = self.bn_proj(self.proj(x), mode) if self.proj is not None else x
        if out.shape != shortcut.shape:
            raise DimensionError(
                f"residual {out.shape} does not match shortcut {shortcut.shape}")
        return relu(out + shortcut)


def residual_block_3d(x: Tensor, block: Bottleneck3d, mode: str = "eval") -> Tensor:
    """Functional entry point for one bottleneck block."""
    return block(x, mode)


class Inside3d(Module):
    """Driver-observation feature extractor with a detachable class head."""

    def __init__(self, config: Inside3dConfig, rng: np.random.Generator):
        self.config = config
        widths = config.stage_widths()
        self.stem = Conv3d(config.in_channels, widths[0], config.stem_kernel,
                           config.stem_stride,
                           tuple(k // 2 for k in config.stem_kernel), rng)
        self.stem_bn = BatchNorm(widths[0], feature_ndim=4)
        self.stages = []
        in_ch = widths[0]
        for width, n_blocks, stride in zip(widths, config.block_counts, config.stage_strides):
            blocks = []
            for b in range(n_blocks):
                blocks.append(Bottleneck3d(in_ch, width, stride if b == 0 else (1, 1, 1),
                                           config.bottleneck_reduction, rng))
                in_ch = width
            self.stages.append(blocks)
        self.fc_feature = Dense(widths[-1], config.feature_dim, rng)
        self.head = Dense(config.feature_dim, config.n_classes, rng)

    def backbone(self, x: Tensor, mode: str) -> Tensor:
        out = relu(self.stem_bn(self.stem(x), mode))
        for blocks in self.stages:
            for block in blocks:
                out = block(out, mode)
        return out

    def features(self, x: Tensor, mode: str,
                 rng: np.random.Generator | None = None) -> Tensor:
        """Pooled, projected feature vector ([feature_dim] or batched)."""
        batched = x.data.ndim == 5
        if x.data.ndim not in (4, 5):
            raise DimensionError(f"clip tensor must be [3,T,H,W] (or batched), got {x.shape}")
        chan = x.data.shape[1] if batched else x.data.shape[0]
        if chan != self.config.in_channels:
            raise DimensionError(
                f"clip carries {chan} channels, model expects {self.config.in_channels}")
        out = self.backbone(x, mode)
        axes = (2, 3, 4) if batched else (1, 2, 3)
        pooled = out.mean(axis=axes)
        if mode == "train" and self.config.dropout_rate > 0.0:
            if rng is None:
                raise ConfigError("train-mode features need an rng for dropout")
            pooled = dropout(pooled, self.config.dropout_rate, rng)
        return self.fc_feature(pooled)

    def logits(self, x: Tensor, mode: str,
               rng: np.random.Generator | None = None) -> Tensor:
        return self.head(self.features(x, mode, rng))


def extract_inside_features(clip, model: Inside3d, mode: str = "eval",
                            rng: np.random.Generator | None = None) -> np.ndarray:
    """Feature vector for one clip (Clip3D or [3,T,H,W] array)."""
    arr = clip.data if isinstance(clip, Clip3D) else np.asarray(clip, dtype=np.float64)
    return model.features(Tensor(arr), mode, rng).data


def balanced_class_weights(labels, n_classes: int) -> np.ndarray:
    """Inverse-frequency weights normalized to mean 1; absent classes get 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    absent = [c for c in range(n_classes) if counts[c] == 0]
    if absent:
        log.warning("classes %s absent from training data; weighting the rest", absent)
    present = counts > 0
    weights = np.ones(n_classes)
    weights[present] = counts[present].sum() / (present.sum() * counts[present])
    return weights


def train_inside(dataset, policy: AugmentationPolicy, sgd: SgdConfig, epochs: int,
                 seed: int, config: Inside3dConfig | None = None,
                 batch_size: int = 8, model: Inside3d | None = None
                 ) -> tuple[Inside3d, list[dict]]:
    """Train the extractor + head on (frames [T,H,W], label) pairs.

    Uses class-weighted cross entropy; horizontal flips mirror the label.
    Returns the model and a per-epoch history of mean loss and training
    accuracy.
    """
    rng = np.random.default_rng(seed)
    if model is None:
        model = Inside3d(config or Inside3dConfig(), rng)
    if not dataset:
        raise DataError("empty training dataset")
    weights = balanced_class_weights([int(lab) for _, lab in dataset],
                                     model.config.n_classes)
    optimizer = Sgd(model.named_parameters(), sgd)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        correct = 0
        for batch_lo in range(0, len(order), batch_size):
            chunk = order[batch_lo:batch_lo + batch_size]
            clips = []
            labels = []
            for i in chunk:
                frames, label = dataset[int(i)]
                clip, flipped = prepare_clip(frames, policy, "train", rng)
                labels.append(int(mirror_label(label)) if flipped else int(label))
                clips.append(clip)
            batch = Tensor(np.stack(clips))
            logits = model.logits(batch, "train", rng)
            probs = softmax(logits)
            loss = cross_entropy(probs, labels, class_weights=weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(epoch)
            losses.append(loss.item())
            correct += int((probs.data.argmax(axis=1) == np.asarray(labels)).sum())
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "accuracy": correct / len(order)})
    return model, history
