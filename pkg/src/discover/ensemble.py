"""2-D classifier ensembles with member dropout and in-graph augmentation.

Members are small convolutional networks emitting raw logits, one per
severity cutoff. During training a random nonempty subset of members is
active per mini-batch and each member sees its own randomly transformed
copy of the input; the active logits (or probabilities) are averaged.
Inference uses the full ensemble with transforms drawn from a seeded
stream.

The affine transform is implemented with a bilinear sampling grid, so it is
differentiable with respect to pixel values and gradients reach whatever
produced the image (here: the projector).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

N_OUTPUTS = 4


@dataclass(frozen=True)
class AugmentParams:
    """One concrete transform: rotate/scale about center, translate, flip.

    Positive rotation turns the image content clockwise when viewed with
    row 0 at the top. Translation is a fraction of each axis length.
    """

    rotation: float = 0.0                       # degrees
    translate: tuple[float, float] = (0.0, 0.0)  # (fraction of W, fraction of H)
    scale: float = 1.0
    hflip: bool = False

    def is_identity_warp(self) -> bool:
        return self.rotation == 0.0 and self.scale == 1.0 and self.translate == (0.0, 0.0)


@dataclass
class AugmentConfig:
    """Sampling ranges; the defaults match the training recipe."""

    rotation: float = 10.0      # degrees, drawn from [-rotation, +rotation]
    translate: float = 0.10     # drawn from [-translate, +translate] per axis
    scale: float = 0.10         # scale factor drawn from [1-scale, 1+scale]
    hflip: bool = True          # flip with probability 1/2 when enabled

    def validate(self) -> None:
        if self.rotation < 0 or self.translate < 0 or not 0 <= self.scale < 1:
            raise ValueError(f"invalid augmentation ranges {self}")

    def sample(self, rng: np.random.Generator) -> AugmentParams:
        return AugmentParams(
            rotation=float(rng.uniform(-self.rotation, self.rotation)),
            translate=(float(rng.uniform(-self.translate, self.translate)),
                       float(rng.uniform(-self.translate, self.translate))),
            scale=float(rng.uniform(1.0 - self.scale, 1.0 + self.scale)),
            hflip=bool(self.hflip and rng.random() < 0.5),
        )


def identity_augments(k: int) -> list[AugmentParams]:
    return [AugmentParams() for _ in range(k)]


def apply_transform(image: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    """Affine warp (bilinear, zero padding) followed by optional horizontal flip.

    Accepts (C, H, W) or (B, C, H, W); identity parameters return the input
    values unchanged.
    """
    squeeze = image.ndim == 3
    x = image.unsqueeze(0) if squeeze else image
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) image, got shape {tuple(image.shape)}")
    if not params.is_identity_warp():
        b, _, h, w = x.shape
        theta = math.radians(params.rotation)
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        tx, ty = params.translate[0] * w, params.translate[1] * h
        ys = torch.arange(h, dtype=x.dtype, device=x.device)
        xs = torch.arange(w, dtype=x.dtype, device=x.device)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        # inverse map: undo translation, then rotation/scale about the center
        qx, qy = gx - cx - tx, gy - cy - ty
        px = (cos_t * qx + sin_t * qy) / params.scale + cx
        py = (-sin_t * qx + cos_t * qy) / params.scale + cy
        grid = torch.stack([2 * px / max(w - 1, 1) - 1, 2 * py / max(h - 1, 1) - 1], dim=-1)
        grid = grid.unsqueeze(0).expand(b, h, w, 2)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    if params.hflip:
        x = torch.flip(x, dims=(-1,))
    return x.squeeze(0) if squeeze else x


def draw_dropout_mask(k: int, rng: np.random.Generator,
                      mode: str = "uniform_subset") -> np.ndarray:
    """Random nonempty member subset as a boolean mask of length k.

    "uniform_subset" draws uniformly over the 2^k - 1 nonempty subsets;
    "bernoulli" flips an independent coin per member and redraws empty masks.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if mode == "uniform_subset":
        value = int(rng.integers(1, 2 ** k))
        return np.array([(value >> i) & 1 for i in range(k)], dtype=bool)
    if mode == "bernoulli":
        while True:
            mask = rng.random(k) < 0.5
            if mask.any():
                return mask
    raise ValueError(f"unknown dropout mode {mode!r}")


@dataclass
class BackboneSpec:
    name: str = "refcnn"
    width: int = 16         # base channel count; doubles per stage (capped at 8x)
    depth: int = 4          # strided conv stages
    n_outputs: int = N_OUTPUTS


class SmallConvBackbone(nn.Module):
    """Strided CNN: `depth` conv stages, global average pool, linear head.

    Works at any input size (all-conv plus adaptive pooling); returns raw
    logits, one per severity cutoff.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        stages = []
        in_ch = 3
        out_ch = spec.width
        for i in range(spec.depth):
            stages += [
                nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(),
            ]
            in_ch = out_ch
            out_ch = min(spec.width * 2 ** (i + 1), spec.width * 8)
        self.features = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(in_ch, spec.n_outputs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.pool(self.features(x)).flatten(1)
        return self.head(h)


def build_backbone(spec: BackboneSpec) -> nn.Module:
    if spec.name.startswith("refcnn") or spec.name.startswith("cnn"):
        return SmallConvBackbone(spec)
    raise ValueError(f"unknown backbone {spec.name!r}")


class EnsembleClassifier(nn.Module):
    """Ensemble of logit-emitting members with dropout-aware averaging."""

    def __init__(self, specs: list[BackboneSpec], mode: str = "logit"):
        super().__init__()
        if not specs:
            raise ValueError("ensemble needs at least one member")
        if mode not in ("logit", "probability"):
            raise ValueError(f"unknown averaging mode {mode!r}")
        self.specs = list(specs)
        self.mode = mode
        self.members = nn.ModuleList(build_backbone(s) for s in specs)

    @property
    def n_members(self) -> int:
        return len(self.members)

    def _check(self, mask, augs):
        mask = np.ones(self.n_members, dtype=bool) if mask is None else np.asarray(mask, bool)
        if mask.shape != (self.n_members,):
            raise ValueError(f"mask length {mask.shape} != {self.n_members} members")
        if not mask.any():
            raise ValueError("dropout mask must keep at least one member")
        augs = identity_augments(self.n_members) if augs is None else list(augs)
        if len(augs) != self.n_members:
            raise ValueError("need one augmentation draw per member")
        return mask, augs

    def member_logits(self, images: torch.Tensor, mask=None, augs=None) -> torch.Tensor:
        """(A, B, N) raw logits of the active members, in member order."""
        mask, augs = self._check(mask, augs)
        outs = [self.members[k](apply_transform(images, augs[k]))
                for k in range(self.n_members) if mask[k]]
        return torch.stack(outs)

    def mean_logits(self, images: torch.Tensor, mask=None, augs=None) -> torch.Tensor:
        return self.member_logits(images, mask, augs).mean(dim=0)

    def forward(self, images: torch.Tensor, mask=None, augs=None,
                mode: str | None = None) -> torch.Tensor:
        """(B, 3, H, W) -> (B, N) cutoff probabilities."""
        logits = self.member_logits(images, mask, augs)
        mode = mode or self.mode
        if mode == "logit":
            return torch.sigmoid(logits.mean(dim=0))
        if mode == "probability":
            return torch.sigmoid(logits).mean(dim=0)
        raise ValueError(f"unknown averaging mode {mode!r}")


def ensemble_forward(image: torch.Tensor, classifier: EnsembleClassifier,
                     mask=None, augs=None, mode: str | None = None) -> torch.Tensor:
    """Functional alias of EnsembleClassifier.forward for single images.

    (3, H, W) inputs return (N,); batched inputs return (B, N).
    """
    squeeze = image.ndim == 3
    x = image.unsqueeze(0) if squeeze else image
    probs = classifier(x, mask=mask, augs=augs, mode=mode)
    return probs.squeeze(0) if squeeze else probs
