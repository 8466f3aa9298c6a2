"""Second-branch B-scan classification, logit fusion, and the training loss.

The second branch reuses the ensemble machinery but wires one selected
B-scan to one output: for cutoff n only the n-th logit of each member's
response to slice n is kept. Branch probabilities are fused by summing
their logits and re-applying the sigmoid; the loss is the mean binary
cross-entropy over all cutoffs, which charges an off-by-k grade error k
wrong binary terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .ensemble import AugmentParams, EnsembleClassifier, N_OUTPUTS, apply_transform

FUSE_EPS = 1e-6
LOSS_EPS = 1e-7


@dataclass
class EnsemblePrediction:
    """Per-cutoff probabilities of both branches plus the fused result."""

    p1: np.ndarray                    # (N,) summary-image branch
    p: np.ndarray                     # (N,) fused (equals p1 when p2 is absent)
    p2: np.ndarray | None = None      # (N,) B-scan branch, if present
    z_indices: np.ndarray | None = None

    def to_json(self) -> dict:
        out = {"p1": [float(v) for v in self.p1], "p": [float(v) for v in self.p]}
        out["p2"] = None if self.p2 is None else [float(v) for v in self.p2]
        out["z_indices"] = None if self.z_indices is None else [int(z) for z in self.z_indices]
        out["grade"] = int((np.asarray(self.p) >= 0.5).sum())
        return out


def fuse(p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
    """sigmoid(logit(p1) + logit(p2)), with inputs clamped away from {0, 1}."""
    p1 = torch.as_tensor(p1).clamp(FUSE_EPS, 1.0 - FUSE_EPS)
    p2 = torch.as_tensor(p2).clamp(FUSE_EPS, 1.0 - FUSE_EPS)
    return torch.sigmoid(torch.logit(p1) + torch.logit(p2))


def bce_loss(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over every (sample, cutoff) term.

    Accumulated in float64 so the reported value is accurate to ~1e-15
    regardless of the network precision; gradients flow back through the
    cast unchanged.
    """
    probs = torch.as_tensor(probs)
    if probs.shape != torch.as_tensor(targets).shape or probs.numel() == 0:
        raise ValueError(f"probs {tuple(probs.shape)} vs targets "
                         f"{tuple(torch.as_tensor(targets).shape)}")
    p = probs.double().clamp(LOSS_EPS, 1.0 - LOSS_EPS)
    y = torch.as_tensor(targets).double()
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def second_branch_forward(slices: torch.Tensor, classifier: EnsembleClassifier,
                          mask=None, augs=None, mode: str | None = None) -> torch.Tensor:
    """Per-cutoff probabilities from the selected B-scans.

    `slices` is (N, 3, X, Y1) or batched (B, N, 3, X, Y1); `augs`, when
    given, is indexed [member][cutoff]. Member k contributes only its n-th
    logit for slice n.
    """
    squeeze = slices.ndim == 4
    x = slices.unsqueeze(0) if squeeze else slices
    if x.ndim != 5 or x.shape[1] != N_OUTPUTS:
        raise ValueError(f"expected (B, {N_OUTPUTS}, 3, X, Y1) slices, got {tuple(slices.shape)}")
    k_members = classifier.n_members
    mask = np.ones(k_members, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("dropout mask must keep at least one member")
    if augs is None:
        augs = [[AugmentParams() for _ in range(N_OUTPUTS)] for _ in range(k_members)]

    mode = mode or classifier.mode
    per_cutoff = []
    for n in range(N_OUTPUTS):
        member_logits = []
        for k in range(k_members):
            if not mask[k]:
                continue
            warped = apply_transform(x[:, n], augs[k][n])
            member_logits.append(classifier.members[k](warped)[:, n])
        stacked = torch.stack(member_logits)          # (active, B)
        if mode == "logit":
            per_cutoff.append(torch.sigmoid(stacked.mean(dim=0)))
        elif mode == "probability":
            per_cutoff.append(torch.sigmoid(stacked).mean(dim=0))
        else:
            raise ValueError(f"unknown averaging mode {mode!r}")
    probs = torch.stack(per_cutoff, dim=1)            # (B, N)
    return probs.squeeze(0) if squeeze else probs
