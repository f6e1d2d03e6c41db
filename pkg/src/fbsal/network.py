"""Feedback-recursive saliency network.

A five-block convolutional encoder produces multi-scale features h2..h5.
Each h_k is sent back through a feedback connection (upsample, 3x3 conv,
ReLU) to the input of block 2 and re-run through blocks 2..5 with the same
weights.  Five saliency heads decode the forward pathway and the four
feedback pathways; a 1x1 fusion conv and a large smoothing conv combine
them into the final map.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

FEEDBACK_SOURCES = (2, 3, 4, 5)
CHECKPOINT_MAGIC = b"SFBN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FeedbackNetConfig:
    block_channels: tuple[int, ...] = (4, 4, 8, 8, 8)
    block_layers: int = 2
    input_channels: int = 3
    head_mid_channels: int = 8
    smoothing_kernel: int = 41
    fixed_width: int | None = None
    dropout_p: float = 0.5
    feedback_enabled: bool = True
    feedback_mode: str = "replace"  # or "add": u + h1 enters block 2
    upsample_mode: str = "nearest"
    # init and input conventions; see README "Training at desk scale"
    smoothing_sigma: float = 1.0
    standardize_input: bool = True

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if len(self.block_channels) != 5:
            raise ValueError(f"block_channels needs exactly 5 entries, got {len(self.block_channels)}")
        if any(c < 1 for c in self.block_channels):
            raise ValueError(f"block_channels must be positive: {self.block_channels}")
        if self.fixed_width is not None and self.fixed_width < 1:
            raise ValueError("fixed_width must be positive")
        if self.block_layers < 1 or self.input_channels < 1 or self.head_mid_channels < 1:
            raise ValueError("block_layers, input_channels and head_mid_channels must be positive")
        if self.smoothing_kernel < 1 or self.smoothing_kernel % 2 == 0:
            raise ValueError(f"smoothing_kernel must be odd and positive, got {self.smoothing_kernel}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.feedback_mode not in ("replace", "add"):
            raise ValueError(f"feedback_mode must be 'replace' or 'add', got {self.feedback_mode!r}")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ValueError(f"upsample_mode must be 'nearest' or 'bilinear', got {self.upsample_mode!r}")
        if not self.smoothing_sigma > 0:
            raise ValueError(f"smoothing_sigma must be positive, got {self.smoothing_sigma}")

    @property
    def widths(self) -> tuple[int, ...]:
        if self.fixed_width is not None:
            return (self.fixed_width,) * 5
        return self.block_channels


@dataclass
class ForwardFeatures:
    h: dict[int, Tensor]
    h1: Tensor


@dataclass
class PathwayScores:
    S: dict[int, Tensor]
    fused: Tensor

    @property
    def heads(self) -> list[Tensor]:
        return [self.S[n] for n in sorted(self.S)]


class Block(Protocol):
    """Anything mapping a feature tensor to the next block's output."""

    params: list[Parameter]
    out_channels: int

    def __call__(self, x: Tensor) -> Tensor: ...


class ConvBlock:
    """``layers`` 3x3 conv + ReLU stages; the first one may stride."""

    def __init__(self, name: str, in_ch: int, out_ch: int, layers: int, stride: int, rng: np.random.Generator):
        self.out_channels = out_ch
        self.stride = stride
        self.params: list[Parameter] = []
        self.convs: list[tuple[Parameter, Parameter]] = []
        for i in range(layers):
            cin = in_ch if i == 0 else out_ch
            w = Parameter(T.kaiming_uniform((out_ch, cin, 3, 3), rng), f"{name}.conv{i}.weight")
            b = Parameter(np.zeros(out_ch), f"{name}.conv{i}.bias")
            self.convs.append((w, b))
            self.params += [w, b]

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(self.convs):
            x = T.relu(T.conv2d(x, w, b, stride=self.stride if i == 0 else 1, padding=1))
        return x


def gaussian_kernel(size: int, sigma: float | None = None) -> np.ndarray:
    sigma = sigma if sigma is not None else size / 6.0
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def standardize_images(x) -> np.ndarray:
    """Zero mean, unit variance per image and channel (constant planes become 0)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise T.ShapeError(f"expected N x C x H x W images, got shape {x.shape}")
    c = x - x.mean(axis=(2, 3), keepdims=True)
    std = np.sqrt(np.mean(c * c, axis=(2, 3), keepdims=True))
    return np.divide(c, std, out=np.zeros_like(c), where=std > 1e-8)


class FeedbackNet:
    def __init__(self, cfg: FeedbackNetConfig | None = None, seed: int = 0, blocks: Sequence[Block] | None = None):
        self.cfg = cfg = cfg or FeedbackNetConfig()
        rng = np.random.default_rng(seed)
        widths = cfg.widths
        self.params: list[Parameter] = []

        if blocks is None:
            blocks = []
            cin = cfg.input_channels
            for i, c in enumerate(widths):
                blocks.append(ConvBlock(f"block{i + 1}", cin, c, cfg.block_layers, 1 if i == 0 else 2, rng))
                cin = c
        if len(blocks) != 5:
            raise ValueError(f"expected 5 blocks, got {len(blocks)}")
        self.blocks = list(blocks)
        widths = tuple(b.out_channels for b in self.blocks)
        self.widths = widths
        for b in self.blocks:
            self.params += b.params

        self.feedback: dict[int, tuple[Parameter, Parameter]] = {}
        if cfg.feedback_enabled:
            for k in FEEDBACK_SOURCES:
                w = Parameter(T.kaiming_uniform((widths[0], widths[k - 1], 3, 3), rng), f"feedback{k}.weight")
                b = Parameter(np.zeros(widths[0]), f"feedback{k}.bias")
                self.feedback[k] = (w, b)
                self.params += [w, b]

        # all five heads exist in both modes so only the feedback
        # connections differ between the full and forward-only models
        concat_ch = sum(widths[1:])
        self.heads: dict[int, tuple[Parameter, ...]] = {}
        for n in range(1, 6):
            w3 = Parameter(T.kaiming_uniform((cfg.head_mid_channels, concat_ch, 3, 3), rng), f"head{n}.conv3x3.weight")
            b3 = Parameter(np.zeros(cfg.head_mid_channels), f"head{n}.conv3x3.bias")
            w1 = Parameter(T.kaiming_uniform((1, cfg.head_mid_channels, 1, 1), rng), f"head{n}.conv1x1.weight")
            b1 = Parameter(np.zeros(1), f"head{n}.conv1x1.bias")
            self.heads[n] = (w3, b3, w1, b1)
            self.params += [w3, b3, w1, b1]

        self.fusion_weight = Parameter(T.kaiming_uniform((1, 5, 1, 1), rng), "fusion.weight")
        self.fusion_bias = Parameter(np.zeros(1), "fusion.bias")
        k = cfg.smoothing_kernel
        # The losses ignore output scale, so a tiny initial scale means huge
        # effective steps: start from a narrow Gaussian with unit centre tap.
        g = gaussian_kernel(k, cfg.smoothing_sigma)
        self.smoothing_weight = Parameter((g / g.max()).reshape(1, 1, k, k), "smoothing.weight")
        self.smoothing_bias = Parameter(np.zeros(1), "smoothing.bias")
        self.params += [self.fusion_weight, self.fusion_bias, self.smoothing_weight, self.smoothing_bias]

        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.params}

    def _up(self, x: Tensor, h: int, w: int) -> Tensor:
        return T.upsample(x, h, w, self.cfg.upsample_mode)

    def encode_forward(self, x) -> ForwardFeatures:
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise T.ShapeError(f"expected N x {self.cfg.input_channels} x H x W input, got {x.shape}")
        H, W = x.shape[2:]
        if H % 16 or W % 16:
            raise T.ShapeError(f"input height and width must be divisible by 16, got {H}x{W}")
        h1 = self.blocks[0](x)
        h = {}
        out = h1
        for k in range(2, 6):
            out = self.blocks[k - 1](out)
            h[k] = out
        return ForwardFeatures(h, h1)

    def feedback_pass(self, h_k: Tensor, k: int, h1: Tensor) -> dict[int, Tensor]:
        if k not in FEEDBACK_SOURCES:
            raise ValueError(f"feedback source must be one of {FEEDBACK_SOURCES}, got {k}")
        if k not in self.feedback:
            raise ValueError("feedback connections are disabled in this network")
        w, b = self.feedback[k]
        u = T.relu(T.conv2d(self._up(h_k, *h1.shape[2:]), w, b, padding=1))
        if self.cfg.feedback_mode == "add":
            u = u + h1
        feats = {}
        for l in range(2, 6):
            u = self.blocks[l - 1](u)
            feats[l] = u
        return feats

    def head_logits(self, features: Sequence[Tensor], n: int, training=False, rng=None) -> Tensor:
        """Head ``n`` before its output ReLU, at the resolution of the first feature map."""
        if not features:
            raise ValueError("decode_score needs at least one feature map")
        th, tw = features[0].shape[2:]
        fused = T.concat([self._up(f, th, tw) for f in features], axis=1)
        w3, b3, w1, b1 = self.heads[n]
        z = T.dropout(fused, self.cfg.dropout_p, training, rng)
        z = T.relu(T.conv2d(z, w3, b3, padding=1))
        return T.conv2d(z, w1, b1)

    def decode_score(self, features: Sequence[Tensor], n: int, target_hw: tuple[int, int], training=False, rng=None) -> Tensor:
        return self._up(T.relu(self.head_logits(features, n, training, rng)), *target_hw)


    def fuse_final(self, scores: Sequence[Tensor]) -> Tensor:
        shape = scores[0].shape
        for i, s in enumerate(scores):
            if s.shape != shape:
                raise T.ShapeError(f"score {i + 1} has shape {s.shape}, expected {shape}")
        w = self.fusion_weight if len(scores) == 5 else self.fusion_weight[:, : len(scores)]
        z = T.relu(T.conv2d(T.concat(list(scores), axis=1), w, self.fusion_bias))
        pad = (self.cfg.smoothing_kernel - 1) // 2
        return T.conv2d(z, self.smoothing_weight, self.smoothing_bias, padding=pad)

    def pathway_features(self, x) -> dict[int, list[Tensor]]:
        """Features h2..h5 per pathway: 1 is the forward pass, n >= 2 the feedback from h_n."""
        if self.cfg.standardize_input:
            # images are data, never trained, so no gradient flows here
            x = standardize_images(x.data if isinstance(x, Tensor) else x)
        fwd = self.encode_forward(x)
        feats = {1: [fwd.h[k] for k in range(2, 6)]}
        if self.cfg.feedback_enabled:
            for n, k in enumerate(FEEDBACK_SOURCES, start=2):
                fb = self.feedback_pass(fwd.h[k], k, fwd.h1)
                feats[n] = [fb[l] for l in range(2, 6)]
        return feats

    def run(self, x, training: bool = False, rng: np.random.Generator | None = None) -> PathwayScores:
        hw = T.as_tensor(x).shape[2:]
        feats = self.pathway_features(x)
        S = {n: self.decode_score(f, n, hw, training, rng) for n, f in feats.items()}
        return PathwayScores(S, self.fuse_final([S[n] for n in sorted(S)]))

    __call__ = run

    def save(self, path) -> None:
        save_checkpoint(self.params, path)

    def load(self, path) -> None:
        load_checkpoint(self.params, path)


def param_count(cfg: FeedbackNetConfig) -> tuple[int, dict[str, int]]:
    """Closed-form parameter count, itemized per layer."""
    widths = cfg.widths
    items: dict[str, int] = {}
    cin = cfg.input_channels
    for i, c in enumerate(widths):
        for j in range(cfg.block_layers):
            fan = cin if j == 0 else c
            items[f"block{i + 1}.conv{j}"] = 9 * fan * c + c
        cin = c
    if cfg.feedback_enabled:
        for k in FEEDBACK_SOURCES:
            items[f"feedback{k}"] = 9 * widths[k - 1] * widths[0] + widths[0]
    concat_ch = sum(widths[1:])
    m = cfg.head_mid_channels
    for n in range(1, 6):
        items[f"head{n}.conv3x3"] = 9 * concat_ch * m + m
        items[f"head{n}.conv1x1"] = m + 1
    items["fusion"] = 5 + 1
    items["smoothing"] = cfg.smoothing_kernel**2 + 1
    return sum(items.values()), items


def feedback_param_count(cfg: FeedbackNetConfig) -> int:
    w = cfg.widths
    return sum(9 * w[k - 1] * w[0] + w[0] for k in FEEDBACK_SOURCES)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: Sequence[Parameter], path) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    for p in params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {buf[:4]!r} at offset 0")
    if len(buf) < 6:
        raise ValueError(f"{path}: truncated header, expected 6 bytes, got {len(buf)}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated at offset {pos}, expected {n} more bytes, got {len(buf) - pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = math.prod(dims)
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float64)
    return out


def load_checkpoint(params: Sequence[Parameter], path) -> None:
    stored = read_checkpoint(path)
    extra = sorted(set(stored) - {p.name for p in params})
    if extra:
        raise KeyError(f"checkpoint {path} has unexpected parameters {extra}")
    for p in params:
        if p.name not in stored:
            raise KeyError(f"checkpoint {path} has no parameter {p.name!r}")
        if stored[p.name].shape != p.data.shape:
            raise T.ShapeError(f"{p.name}: checkpoint shape {stored[p.name].shape} != {p.data.shape}")
        p.data[...] = stored[p.name]
