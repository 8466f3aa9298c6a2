"""Trainable 3-D -> 2-D en-face projection.

Every operation acts along the depth axis only (1-D pooling and
convolutions with receptive field 1 in the en-face plane), so each A-scan
is reduced independently and no en-face detail can leak between pixels.
Three blocks each shrink the depth by ~4x (pool /2, strided conv /2,
ceil-mode), a global mean removes the remaining depth, and a per-pixel
dense layer with sigmoid yields a 3-channel image in (0, 1).

Tensors are laid out (batch, channel, x, y, z); the en-face output is
(batch, 3, x, z).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .preprocess import PreprocessedVolume

N_BLOCKS = 3
OUT_CHANNELS = 3
MIN_DEPTH = 16


@dataclass
class ProjectorConfig:
    phi: int = 8                # filters per layer in the first block
    use_skip: bool = False
    kernel_depth: int = 3       # 1-D conv kernel size along y, odd

    def validate(self) -> None:
        if self.phi < 1:
            raise ValueError("phi must be >= 1")
        if self.kernel_depth < 1 or self.kernel_depth % 2 == 0:
            raise ValueError("kernel_depth must be odd and >= 1")

    def block_channels(self) -> list[int]:
        return [2 ** i * self.phi for i in range(N_BLOCKS)]


@dataclass
class SummaryImage:
    """En-face 3-channel projection with every pixel strictly inside (0, 1)."""

    data: np.ndarray    # (3, X, Z) float32


def block_depth(d: int) -> int:
    return math.ceil(math.ceil(d / 2) / 2)


def depth_trace(y1: int) -> list[int]:
    """Depth after each block for an input of depth y1."""
    trace = [y1]
    for _ in range(N_BLOCKS):
        trace.append(block_depth(trace[-1]))
    return trace


class _DepthBlock(nn.Module):
    """pool/2 -> strided conv -> conv -> batch norm -> optional skip -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_depth: int,
                 first_block: bool, use_skip: bool):
        super().__init__()
        pad = (0, kernel_depth // 2, 0)
        if first_block:
            self.pool = nn.AvgPool3d((1, 2, 1), stride=(1, 2, 1), ceil_mode=True,
                                     count_include_pad=False)
        else:
            self.pool = nn.MaxPool3d((1, 2, 1), stride=(1, 2, 1), ceil_mode=True)
        self.conv1 = nn.Conv3d(in_channels, out_channels, (1, kernel_depth, 1),
                               stride=(1, 2, 1), padding=pad)
        self.conv2 = nn.Conv3d(out_channels, out_channels, (1, kernel_depth, 1),
                               stride=(1, 1, 1), padding=pad)
        self.norm = nn.BatchNorm3d(out_channels)
        # 1x1 channel projection with stride-4 subsampling matches the block's
        # ceil(ceil(d/2)/2) = ceil(d/4) depth reduction exactly
        self.skip = nn.Conv3d(in_channels, out_channels, 1, stride=(1, 4, 1)) \
            if use_skip else None
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x if x.shape[3] == 1 else self.pool(x)
        h = self.conv2(self.conv1(h))
        h = self.norm(h)
        if self.skip is not None:
            h = h + self.skip(x)
        return self.act(h)


class Projector(nn.Module):
    def __init__(self, config: ProjectorConfig | None = None):
        super().__init__()
        self.config = config or ProjectorConfig()
        self.config.validate()
        channels = [OUT_CHANNELS] + self.config.block_channels()
        self.blocks = nn.ModuleList([
            _DepthBlock(channels[i], channels[i + 1], self.config.kernel_depth,
                        first_block=(i == 0), use_skip=self.config.use_skip)
            for i in range(N_BLOCKS)
        ])
        self.head = nn.Conv2d(channels[-1], OUT_CHANNELS, 1)

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        """(B, 3, X, Y, Z) -> (B, 3, X, Z), values strictly in (0, 1)."""
        if volume.ndim != 5 or volume.shape[1] != OUT_CHANNELS:
            raise ValueError(f"expected (B, 3, X, Y, Z) input, got {tuple(volume.shape)}")
        if volume.shape[3] < MIN_DEPTH:
            raise ValueError(f"depth {volume.shape[3]} < {MIN_DEPTH}: three blocks undefined")
        h = volume
        for blk in self.blocks:
            h = blk(h)
        h = h.mean(dim=3)                       # global mean over remaining depth
        out = torch.sigmoid(self.head(h))
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite activations in projector output")
        return out


def projector_param_count(config: ProjectorConfig) -> int:
    """Closed-form trainable parameter total for the instantiated network."""
    config.validate()
    k = config.kernel_depth
    channels = [OUT_CHANNELS] + config.block_channels()
    total = 0
    for i in range(N_BLOCKS):
        cin, cout = channels[i], channels[i + 1]
        total += cin * cout * k + cout          # strided conv
        total += cout * cout * k + cout         # second conv
        total += 2 * cout                       # batch norm affine
        if config.use_skip:
            total += cin * cout + cout          # 1x1 projection
    total += channels[-1] * OUT_CHANNELS + OUT_CHANNELS   # per-pixel dense head
    return total


def project(volume: PreprocessedVolume, model: Projector) -> SummaryImage:
    """Evaluation-mode convenience wrapper over numpy volumes."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            tensor = torch.from_numpy(np.ascontiguousarray(volume.data)).unsqueeze(0)
            out = model(tensor.to(next(model.parameters()).dtype))
    finally:
        model.train(was_training)
    return SummaryImage(data=out.squeeze(0).numpy().astype(np.float32))
