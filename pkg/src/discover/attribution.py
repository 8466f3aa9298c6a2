"""Gradient attribution over the summary image and B-scan selection.

Attributions target the pre-sigmoid ensemble logit of one severity cutoff,
computed through the full classification branch (transforms included) with
every member active. Per-pixel attributions are folded to per-B-scan scores
by summing absolute values over the fast axis and channels, normalized to a
distribution over slow-scan indices; slices are then picked by argmax
(inference) or a multinomial draw (training).

ReLU-rule methods are implemented with backward hooks, so a classifier is
not safe for concurrent attribution calls; gradients are taken with
`torch.autograd.grad`, leaving parameter `.grad` buffers untouched.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .ensemble import EnsembleClassifier, N_OUTPUTS

METHODS = ("saliency", "deconv", "guided_backprop", "deeplift")


@dataclass
class AttributionMap:
    a: np.ndarray        # (X, Z, C, N) per-pixel attributions
    alpha: np.ndarray    # (Z, N) normalized per-B-scan scores


@dataclass
class SelectedBScans:
    z_indices: np.ndarray    # (N,) selected slow-scan indices
    slices: np.ndarray       # (N, 3, X, Y1) extracted B-scans


def _relus(module: nn.Module) -> list[nn.ReLU]:
    return [m for m in module.modules() if isinstance(m, nn.ReLU)]


@contextmanager
def _relu_rule(classifier: nn.Module, rule: str):
    """Swap the backward behaviour of every ReLU in the tree.

    deconv: pass positive incoming gradients regardless of the forward input;
    guided: additionally zero positions whose forward input was negative.
    """
    stored: dict[nn.Module, torch.Tensor] = {}
    handles = []

    def pre_hook(module, args):
        stored[module] = args[0].detach()

    def backward_hook(module, grad_input, grad_output):
        g = grad_output[0].clamp(min=0)
        if rule == "guided":
            g = g * (stored[module] > 0).to(g.dtype)
        return (g,)

    for m in _relus(classifier):
        if rule == "guided":
            handles.append(m.register_forward_pre_hook(pre_hook))
        handles.append(m.register_full_backward_hook(backward_hook))
    try:
        yield
    finally:
        for h in handles:
            h.remove()


@contextmanager
def _deeplift_rule(classifier: nn.Module, reference_forward):
    """Rescale-rule multipliers for every ReLU against a reference forward.

    `reference_forward()` must run the exact same graph on the reference
    input; its per-ReLU inputs are recorded first, then the actual forward's
    inputs, and the backward pass multiplies incoming gradients by
    (relu(x) - relu(x0)) / (x - x0), falling back to the local derivative
    where the input difference vanishes.
    """
    ref_inputs: dict[nn.Module, torch.Tensor] = {}
    act_inputs: dict[nn.Module, torch.Tensor] = {}
    phase = {"current": "ref"}
    handles = []

    def pre_hook(module, args):
        target = ref_inputs if phase["current"] == "ref" else act_inputs
        target[module] = args[0].detach()

    def backward_hook(module, grad_input, grad_output):
        x, x0 = act_inputs[module], ref_inputs[module]
        dx = x - x0
        dy = torch.relu(x) - torch.relu(x0)
        mult = torch.where(dx.abs() > 1e-10,
                           dy / torch.where(dx.abs() > 1e-10, dx, torch.ones_like(dx)),
                           (x > 0).to(x.dtype))
        return (grad_output[0] * mult,)

    for m in _relus(classifier):
        handles.append(m.register_forward_pre_hook(pre_hook))
        handles.append(m.register_full_backward_hook(backward_hook))
    try:
        with torch.no_grad():
            reference_forward()
        phase["current"] = "act"
        yield
    finally:
        for h in handles:
            h.remove()


def attribute(image: np.ndarray | torch.Tensor, classifier: EnsembleClassifier,
              method: str, cutoff_index: int, augs=None) -> np.ndarray:
    """Per-pixel attribution a(x, z, c) of cutoff `cutoff_index` (0-based).

    The classifier must be in evaluation mode. By default the in-graph
    transforms are evaluated at identity parameters so pixel coordinates
    keep their B-scan correspondence; pass explicit `augs` to attribute
    through warped copies (experimental).
    """
    if method not in METHODS:
        raise ValueError(f"unknown attribution method {method!r}; choose from {METHODS}")
    if classifier.training:
        raise RuntimeError("attribution requires the classifier in evaluation mode")
    if not 0 <= cutoff_index < N_OUTPUTS:
        raise ValueError(f"cutoff_index {cutoff_index} outside [0, {N_OUTPUTS})")

    if isinstance(image, np.ndarray):
        tensor = torch.from_numpy(np.ascontiguousarray(image))
    else:
        tensor = image.detach()
    first_param = next(classifier.parameters(), None)
    tensor = tensor.to(first_param.dtype if first_param is not None
                       else torch.get_default_dtype())
    if tensor.ndim != 3:
        raise ValueError(f"expected a (3, X, Z) summary image, got {tuple(tensor.shape)}")

    leaf = tensor.clone().requires_grad_(True)

    def target(x):
        return classifier.mean_logits(x.unsqueeze(0), mask=None, augs=augs)[0, cutoff_index]

    if method == "saliency":
        grad = torch.autograd.grad(target(leaf), leaf)[0]
    elif method in ("deconv", "guided_backprop"):
        rule = "guided" if method == "guided_backprop" else "deconv"
        with _relu_rule(classifier, rule):
            grad = torch.autograd.grad(target(leaf), leaf)[0]
    else:  # deeplift
        reference = torch.zeros_like(tensor)
        with _deeplift_rule(classifier, lambda: target(reference)):
            grad = torch.autograd.grad(target(leaf), leaf)[0]
        grad = grad * (leaf.detach() - reference)

    result = grad.detach()
    if not torch.isfinite(result).all():
        raise FloatingPointError("non-finite attribution values")
    return result.permute(1, 2, 0).numpy()      # (X, Z, C)


def attribute_all(image, classifier: EnsembleClassifier, method: str,
                  augs=None) -> AttributionMap:
    """Attributions for every cutoff, plus normalized per-B-scan scores."""
    per_cutoff = [attribute(image, classifier, method, n, augs=augs)
                  for n in range(N_OUTPUTS)]
    a = np.stack(per_cutoff, axis=-1)            # (X, Z, C, N)
    return AttributionMap(a=a, alpha=ascan_attribution(a))


def ascan_attribution(a: np.ndarray) -> np.ndarray:
    """Fold per-pixel attributions to per-B-scan weights.

    alpha(z, n) = sum_{x,c} |a(x,z,c,n)| / sum_{z,x,c} |a(x,z,c,n)|; an
    all-zero cutoff falls back to the uniform distribution over slices.
    """
    a = np.asarray(a)
    if a.ndim != 4:
        raise ValueError(f"expected (X, Z, C, N) attributions, got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("attributions contain non-finite values")
    per_slice = np.abs(a).sum(axis=(0, 2))       # (Z, N)
    totals = per_slice.sum(axis=0, keepdims=True)
    n_slices = per_slice.shape[0]
    uniform = np.full_like(per_slice, 1.0 / n_slices)
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = np.where(totals > 0, per_slice / np.where(totals > 0, totals, 1.0), uniform)
    return alpha


def select_bscans(volume, alpha: np.ndarray, mode: str = "inference",
                  rng: np.random.Generator | None = None) -> SelectedBScans:
    """Pick one B-scan per cutoff and extract it from the volume.

    inference: argmax over alpha (first index on ties); training: one draw
    from the multinomial distribution given by alpha's column.
    """
    data = np.asarray(volume) if isinstance(volume, np.ndarray) else np.asarray(volume.data)
    if data.ndim != 4:
        raise ValueError(f"expected a (3, X, Y1, Z) volume, got {data.shape}")
    n_slices, n_cutoffs = alpha.shape
    if data.shape[3] != n_slices:
        raise ValueError(f"alpha has {n_slices} slices but volume has {data.shape[3]}")

    if mode == "inference":
        z_indices = np.argmax(alpha, axis=0).astype(np.int64)
    elif mode == "training":
        if rng is None:
            raise ValueError("training-mode selection needs an rng")
        z_indices = np.empty(n_cutoffs, dtype=np.int64)
        for n in range(n_cutoffs):
            weights = alpha[:, n] / alpha[:, n].sum()
            z_indices[n] = rng.choice(n_slices, p=weights)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")

    slices = np.stack([data[:, :, :, z] for z in z_indices])
    return SelectedBScans(z_indices=z_indices, slices=slices)
