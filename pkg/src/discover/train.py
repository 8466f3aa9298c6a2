"""Training schedules (one-step / two-step), checkpoints, and inference.

Two-step: the projector and the summary-image ensemble are optimized alone
until the mean validation AUC stops improving; they are then frozen
(parameters and batch-norm statistics) and the B-scan ensemble is trained
on the fused prediction. One-step optimizes everything jointly. B-scan
selection is a multinomial draw during training and argmax at evaluation
and inference.

All random draws (batch order, member dropout, transform parameters,
slice selection) come from per-purpose streams derived from one seed, so a
fixed seed reproduces the metrics log and predictions on one device.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attribution import METHODS, attribute_all, select_bscans
from .ensemble import (AugmentConfig, BackboneSpec, EnsembleClassifier,
                       draw_dropout_mask)
from .evaluate import roc_auc
from .fusion import EnsemblePrediction, bce_loss, fuse, second_branch_forward
from .octa_store import OctaBundle, encode_labels, read_bundle
from .preprocess import PreprocessConfig, PreprocessedVolume, preprocess_bundle
from .projector import Projector, ProjectorConfig
from .synthgen import DatasetManifest, load_manifest

CHECKPOINT_VERSION = "discover-checkpoint/1"
N_OUTPUTS = 4

# rng stream tags, combined with a stage index so stages draw independently
_MASK, _AUG, _SELECT, _BATCH, _EVAL_AUG, _INFER_AUG = range(6)


def _stream(seed: int, stage: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stage, tag)))


@dataclass
class PipelineConfig:
    """Architecture and inference-behaviour settings shared by train/infer."""

    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    members: list[BackboneSpec] = field(default_factory=lambda: [
        BackboneSpec(name="refcnn-a", width=8),
        BackboneSpec(name="refcnn-b", width=12),
        BackboneSpec(name="refcnn-c", width=16),
    ])
    mode: str = "logit"                  # or "probability"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dropout_mode: str = "uniform_subset"  # or "bernoulli"
    inference_draws: int = 1             # transform draws averaged at inference
    attribution: str = "guided_backprop"

    def validate(self) -> None:
        self.projector.validate()
        self.augment.validate()
        if self.mode not in ("logit", "probability"):
            raise ValueError(f"unknown averaging mode {self.mode!r}")
        if self.dropout_mode not in ("uniform_subset", "bernoulli"):
            raise ValueError(f"unknown dropout mode {self.dropout_mode!r}")
        if self.attribution not in METHODS:
            raise ValueError(f"unknown attribution method {self.attribution!r}")
        if self.inference_draws < 1:
            raise ValueError("inference_draws must be >= 1")
        if not self.members:
            raise ValueError("need at least one ensemble member")


@dataclass
class TrainConfig:
    schedule: str = "two_step"          # or "one_step"
    lr: float = 1e-3
    lr_decay: float = 0.99              # multiplicative, per epoch
    max_epochs: int = 60
    batch_size: int = 8
    patience: int = 10                  # epochs without val mean-AUC improvement
    seed: int = 0
    bscan_selection: str = "multinomial"  # training-time; "argmax" for the ablation

    def validate(self) -> None:
        if self.schedule not in ("two_step", "one_step"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr must be > 0 and lr_decay in (0, 1]")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_epochs, batch_size, and patience must be >= 1")
        if self.bscan_selection not in ("multinomial", "argmax"):
            raise ValueError(f"unknown selection mode {self.bscan_selection!r}")


class PipelineModel(torch.nn.Module):
    """Projector plus the two classification branches (no parameter sharing)."""

    def __init__(self, config: PipelineConfig, with_c2: bool):
        super().__init__()
        config.validate()
        self.pipeline_config = config
        self.projector = Projector(config.projector)
        self.c1 = EnsembleClassifier(config.members, config.mode)
        self.c2 = EnsembleClassifier(config.members, config.mode) if with_c2 else None

    @property
    def has_c2(self) -> bool:
        return self.c2 is not None

    def add_c2(self) -> None:
        if self.c2 is None:
            self.c2 = EnsembleClassifier(self.pipeline_config.members,
                                         self.pipeline_config.mode)


@dataclass
class Sample:
    id: str
    grade: int
    labels: np.ndarray          # (4,) binary cutoff labels
    volume: torch.Tensor        # (3, X, Y1, Z) float32


def load_samples(data_dir: str | Path, manifest: DatasetManifest, split: str,
                 pre: PreprocessConfig) -> list[Sample]:
    data_dir = Path(data_dir)
    samples = []
    for entry in manifest.bundles:
        if entry["split"] != split:
            continue
        bundle = read_bundle(data_dir / entry["id"])
        vol = preprocess_bundle(bundle, pre)
        samples.append(Sample(id=entry["id"], grade=bundle.grade,
                              labels=encode_labels(bundle.grade),
                              volume=torch.from_numpy(vol.data)))
    if not samples:
        raise ValueError(f"no bundles for split {split!r} in {data_dir}")
    return samples


def _targets(samples: list[Sample], idx) -> torch.Tensor:
    return torch.tensor(np.stack([samples[i].labels for i in idx]), dtype=torch.float32)


def _volumes(samples: list[Sample], idx) -> torch.Tensor:
    return torch.stack([samples[i].volume for i in idx])


def _batch_alphas(model: PipelineModel, summary: torch.Tensor) -> list[np.ndarray]:
    """Per-sample B-scan weights through the inference-configuration C1."""
    was_training = model.c1.training
    model.c1.eval()
    try:
        alphas = [attribute_all(summary[i].detach(), model.c1,
                                model.pipeline_config.attribution).alpha
                  for i in range(summary.shape[0])]
    finally:
        model.c1.train(was_training)
    return alphas


def _batch_slices(samples, idx, alphas, mode, rng):
    picks = [select_bscans(samples[i].volume.numpy(), alpha, mode=mode, rng=rng)
             for i, alpha in zip(idx, alphas)]
    slices = torch.from_numpy(np.stack([p.slices for p in picks]))
    z = np.stack([p.z_indices for p in picks])
    return slices, z


def _c2_augs(config: PipelineConfig, rng) -> list[list]:
    return [[config.augment.sample(rng) for _ in range(N_OUTPUTS)]
            for _ in range(len(config.members))]


def _eval_branch1(model, summary, rng, draws):
    cfg = model.pipeline_config
    logits = [model.c1.member_logits(
        summary, mask=None, augs=[cfg.augment.sample(rng) for _ in cfg.members])
        for _ in range(draws)]
    stacked = torch.cat(logits)                      # (K * draws, B, N)
    if cfg.mode == "logit":
        return torch.sigmoid(stacked.mean(dim=0))
    return torch.sigmoid(stacked).mean(dim=0)


def evaluate_split(model: PipelineModel, samples: list[Sample], seed: int,
                   batch_size: int = 8, use_c2: bool | None = None,
                   draws: int = 1) -> dict:
    """Deterministic evaluation: full ensemble, seeded transforms, argmax slices."""
    use_c2 = model.has_c2 if use_c2 is None else (use_c2 and model.has_c2)
    rng = _stream(seed, 0, _EVAL_AUG)
    model.eval()
    p1_all, p_all, z_all = [], [], []
    for start in range(0, len(samples), batch_size):
        idx = list(range(start, min(start + batch_size, len(samples))))
        vols = _volumes(samples, idx)
        with torch.no_grad():
            summary = model.projector(vols)
            p1 = _eval_branch1(model, summary, rng, draws)
        if use_c2:
            alphas = _batch_alphas(model, summary)
            slices, z = _batch_slices(samples, idx, alphas, "inference", None)
            with torch.no_grad():
                p2 = second_branch_forward(slices, model.c2, mask=None,
                                           augs=_c2_augs(model.pipeline_config, rng))
                p = fuse(p1, p2)
            z_all.append(z)
        else:
            p = p1
        p1_all.append(p1.numpy())
        p_all.append(p.numpy())

    p1_arr = np.concatenate(p1_all)
    p_arr = np.concatenate(p_all)
    labels = np.stack([s.labels for s in samples])
    loss = float(bce_loss(torch.from_numpy(p_arr), torch.from_numpy(labels.astype(np.float32))))
    aucs = [roc_auc(p_arr[:, n], labels[:, n]).auc
            if 0 < labels[:, n].sum() < len(samples) else float("nan")
            for n in range(N_OUTPUTS)]
    finite = [a for a in aucs if not math.isnan(a)]
    out = {"loss": loss, "auc_per_cutoff": aucs,
           "mean_auc": float(np.mean(finite)) if finite else float("nan"),
           "p1": p1_arr, "p": p_arr}
    if z_all:
        out["z_indices"] = np.concatenate(z_all)
    return out


def _append_metrics(log: list, path: Path | None, record: dict) -> None:
    log.append(record)
    if path is not None:
        with path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")


def _check_finite(loss: torch.Tensor, stage: str, epoch: int) -> None:
    if not math.isfinite(float(loss.detach())):
        raise RuntimeError(
            f"training diverged: non-finite loss in stage {stage!r} at epoch {epoch}")


def _train_auc_record(probs: list[np.ndarray], labels: list[np.ndarray]) -> tuple[list, float]:
    p = np.concatenate(probs)
    y = np.concatenate(labels)
    aucs = []
    for n in range(N_OUTPUTS):
        if (y[:, n] == y[0, n]).all():
            aucs.append(float("nan"))
        else:
            aucs.append(roc_auc(p[:, n], y[:, n]).auc)
    finite = [a for a in aucs if not math.isnan(a)]
    return aucs, float(np.mean(finite)) if finite else float("nan")


def _fit(model: PipelineModel, stage: str, parameters, forward_batch,
         train_samples, val_samples, config: TrainConfig, metrics_log, metrics_path,
         eval_seed_tag: int) -> float:
    """Shared optimization loop with early stopping on the val mean AUC."""
    optimizer = torch.optim.Adam(parameters, lr=config.lr)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=config.lr_decay)
    stage_idx = {"c1": 1, "c2": 2, "joint": 3}[stage]
    batch_rng = _stream(config.seed, stage_idx, _BATCH)

    best_auc, best_state, stale = -np.inf, None, 0
    for epoch in range(1, config.max_epochs + 1):
        order = batch_rng.permutation(len(train_samples))
        epoch_losses, epoch_probs, epoch_labels = [], [], []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size].tolist()
            loss, probs = forward_batch(idx)
            _check_finite(loss, stage, epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss))
            epoch_probs.append(probs.detach().numpy())
            epoch_labels.append(np.stack([train_samples[i].labels for i in idx]))
        scheduler.step()

        train_aucs, train_mean = _train_auc_record(epoch_probs, epoch_labels)
        _append_metrics(metrics_log, metrics_path, {
            "stage": stage, "epoch": epoch, "split": "train",
            "loss": float(np.mean(epoch_losses)),
            "auc_per_cutoff": train_aucs, "mean_auc": train_mean,
        })
        val = evaluate_split(model, val_samples, config.seed + eval_seed_tag,
                             batch_size=config.batch_size,
                             use_c2=model.has_c2 and stage != "c1")
        _append_metrics(metrics_log, metrics_path, {
            "stage": stage, "epoch": epoch, "split": "val", "loss": val["loss"],
            "auc_per_cutoff": val["auc_per_cutoff"], "mean_auc": val["mean_auc"],
        })
        if val["mean_auc"] > best_auc:
            best_auc = val["mean_auc"]
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return float(best_auc)


def train_stage(model: PipelineModel, stage: str, train_samples, val_samples,
                config: TrainConfig, metrics_log: list, metrics_path: Path | None) -> float:
    """Run one schedule phase ("c1", "c2", or "joint"); returns best val mean AUC."""
    config.validate()
    cfg = model.pipeline_config
    k = len(cfg.members)
    stage_idx = {"c1": 1, "c2": 2, "joint": 3}[stage]
    mask_rng = _stream(config.seed, stage_idx, _MASK)
    aug_rng = _stream(config.seed, stage_idx, _AUG)
    select_rng = _stream(config.seed, stage_idx, _SELECT)

    if stage == "c1":
        model.projector.train()
        model.c1.train()
        params = list(model.projector.parameters()) + list(model.c1.parameters())

        def forward_batch(idx):
            model.projector.train()
            model.c1.train()
            vols = _volumes(train_samples, idx)
            summary = model.projector(vols)
            mask = draw_dropout_mask(k, mask_rng, cfg.dropout_mode)
            augs = [cfg.augment.sample(aug_rng) for _ in range(k)]
            p1 = model.c1(summary, mask=mask, augs=augs)
            return bce_loss(p1, _targets(train_samples, idx)), p1

        return _fit(model, stage, params, forward_batch, train_samples, val_samples,
                    config, metrics_log, metrics_path, eval_seed_tag=0)

    if stage == "c2":
        model.add_c2()
        # frozen first branch: no parameter updates and no running-stat updates;
        # stale first-stage gradients are dropped so none can ever reappear
        model.projector.requires_grad_(False)
        model.c1.requires_grad_(False)
        model.projector.eval()
        model.c1.eval()
        for p in list(model.projector.parameters()) + list(model.c1.parameters()):
            p.grad = None
        params = list(model.c2.parameters())

        def forward_batch(idx):
            model.c2.train()
            vols = _volumes(train_samples, idx)
            with torch.no_grad():
                summary = model.projector(vols)
                # frozen branch runs in its inference configuration: full
                # ensemble, transforms still drawn
                p1 = model.c1(summary, mask=None,
                              augs=[cfg.augment.sample(aug_rng) for _ in range(k)])
            alphas = _batch_alphas(model, summary)
            slices, _ = _batch_slices(train_samples, idx, alphas,
                                      "training" if config.bscan_selection == "multinomial"
                                      else "inference", select_rng)
            mask = draw_dropout_mask(k, mask_rng, cfg.dropout_mode)
            p2 = second_branch_forward(slices, model.c2, mask=mask,
                                       augs=_c2_augs(cfg, aug_rng))
            p = fuse(p1, p2)
            return bce_loss(p, _targets(train_samples, idx)), p

        return _fit(model, stage, params, forward_batch, train_samples, val_samples,
                    config, metrics_log, metrics_path, eval_seed_tag=1)

    if stage == "joint":
        model.add_c2()
        params = list(model.parameters())

        def forward_batch(idx):
            model.train()
            vols = _volumes(train_samples, idx)
            summary = model.projector(vols)
            mask1 = draw_dropout_mask(k, mask_rng, cfg.dropout_mode)
            augs1 = [cfg.augment.sample(aug_rng) for _ in range(k)]
            p1 = model.c1(summary, mask=mask1, augs=augs1)
            alphas = _batch_alphas(model, summary)
            slices, _ = _batch_slices(train_samples, idx, alphas,
                                      "training" if config.bscan_selection == "multinomial"
                                      else "inference", select_rng)
            mask2 = draw_dropout_mask(k, mask_rng, cfg.dropout_mode)
            p2 = second_branch_forward(slices, model.c2, mask=mask2,
                                       augs=_c2_augs(cfg, aug_rng))
            p = fuse(p1, p2)
            return bce_loss(p, _targets(train_samples, idx)), p

        return _fit(model, stage, params, forward_batch, train_samples, val_samples,
                    config, metrics_log, metrics_path, eval_seed_tag=2)

    raise ValueError(f"unknown stage {stage!r}")


def train(data_dir: str | Path, out_dir: str | Path, pipeline: PipelineConfig,
          config: TrainConfig) -> dict:
    """Run the configured schedule end to end and write a checkpoint."""
    pipeline.validate()
    config.validate()
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(data_dir / "manifest.json")
    train_samples = load_samples(data_dir, manifest, "train", pipeline.preprocess)
    val_samples = load_samples(data_dir, manifest, "val", pipeline.preprocess)

    torch.manual_seed(config.seed)
    model = PipelineModel(pipeline, with_c2=False)
    metrics_log: list[dict] = []
    metrics_path = out_dir / "metrics.jsonl"
    metrics_path.write_text("")

    if config.schedule == "two_step":
        best_a = train_stage(model, "c1", train_samples, val_samples, config,
                             metrics_log, metrics_path)
        save_checkpoint(out_dir / "checkpoint_c1.pt", model, config)
        best = train_stage(model, "c2", train_samples, val_samples, config,
                           metrics_log, metrics_path)
        summary = {"schedule": "two_step", "best_val_mean_auc_c1": best_a,
                   "best_val_mean_auc": best}
    else:
        best = train_stage(model, "joint", train_samples, val_samples, config,
                           metrics_log, metrics_path)
        summary = {"schedule": "one_step", "best_val_mean_auc": best}

    save_checkpoint(out_dir / "checkpoint.pt", model, config)
    summary["checkpoint"] = str(out_dir / "checkpoint.pt")
    summary["metrics"] = str(metrics_path)
    return summary


# --- checkpoint serialization ------------------------------------------------

def save_checkpoint(path: str | Path, model: PipelineModel, config: TrainConfig) -> None:
    cfg = model.pipeline_config
    payload = {
        "format": CHECKPOINT_VERSION,
        "pipeline": {
            "preprocess": asdict(cfg.preprocess),
            "projector": asdict(cfg.projector),
            "members": [asdict(m) for m in cfg.members],
            "mode": cfg.mode,
            "augment": asdict(cfg.augment),
            "dropout_mode": cfg.dropout_mode,
            "inference_draws": cfg.inference_draws,
            "attribution": cfg.attribution,
        },
        "train": asdict(config),
        "has_c2": model.has_c2,
        "state": {
            "projector": model.projector.state_dict(),
            "c1": model.c1.state_dict(),
            **({"c2": model.c2.state_dict()} if model.has_c2 else {}),
        },
    }
    torch.save(payload, path)


def pipeline_config_from_dict(data: dict) -> PipelineConfig:
    return PipelineConfig(
        preprocess=PreprocessConfig(**data["preprocess"]),
        projector=ProjectorConfig(**data["projector"]),
        members=[BackboneSpec(**{**m, "name": m.get("name", "refcnn")})
                 for m in data["members"]],
        mode=data.get("mode", "logit"),
        augment=AugmentConfig(**data["augment"]),
        dropout_mode=data.get("dropout_mode", "uniform_subset"),
        inference_draws=int(data.get("inference_draws", 1)),
        attribution=data.get("attribution", "guided_backprop"),
    )


def load_checkpoint(path: str | Path) -> tuple[PipelineModel, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    pipeline = pipeline_config_from_dict(payload["pipeline"])
    model = PipelineModel(pipeline, with_c2=payload["has_c2"])
    model.projector.load_state_dict(payload["state"]["projector"])
    model.c1.load_state_dict(payload["state"]["c1"])
    if payload["has_c2"]:
        model.c2.load_state_dict(payload["state"]["c2"])
    model.eval()
    return model, payload


# --- end-to-end inference -----------------------------------------------------

def resolve_volume(source, cfg: PipelineConfig) -> PreprocessedVolume:
    """Accept a bundle directory, an OctaBundle, or an already-preprocessed volume."""
    if isinstance(source, (str, Path)):
        source = read_bundle(source)
    if isinstance(source, OctaBundle):
        return preprocess_bundle(source, cfg.preprocess)
    if isinstance(source, PreprocessedVolume):
        for key, expected in (("y0", cfg.preprocess.y0), ("y1", cfg.preprocess.y1)):
            got = source.provenance.get(key)
            if got is not None and got != expected:
                raise ValueError(
                    f"preprocessed volume has {key}={got}, checkpoint expects {expected}")
        return source
    raise TypeError(f"cannot infer from {type(source).__name__}")


def pipeline_forward(volume: PreprocessedVolume, model: PipelineModel, seed: int = 0) -> dict:
    """Run the full pipeline, returning the prediction and its intermediates."""
    cfg = model.pipeline_config
    model.eval()
    rng = _stream(seed, 0, _INFER_AUG)
    vol_tensor = torch.from_numpy(np.ascontiguousarray(volume.data)).unsqueeze(0)
    with torch.no_grad():
        summary = model.projector(vol_tensor)
        p1 = _eval_branch1(model, summary, rng, cfg.inference_draws).squeeze(0)

    amap = attribute_all(summary.squeeze(0), model.c1, cfg.attribution)
    picks = select_bscans(volume.data, amap.alpha, mode="inference")

    if model.has_c2:
        slices = torch.from_numpy(picks.slices)
        with torch.no_grad():
            p2 = second_branch_forward(slices, model.c2, mask=None,
                                       augs=_c2_augs(cfg, rng))
            p = fuse(p1, p2)
        prediction = EnsemblePrediction(p1=p1.numpy().astype(np.float64),
                                        p2=p2.numpy().astype(np.float64),
                                        p=p.numpy().astype(np.float64),
                                        z_indices=picks.z_indices)
    else:
        prediction = EnsemblePrediction(p1=p1.numpy().astype(np.float64),
                                        p=p1.numpy().astype(np.float64),
                                        z_indices=picks.z_indices)
    return {
        "prediction": prediction,
        "summary": summary.squeeze(0).numpy(),
        "attribution": amap,
        "bscans": picks,
        "volume": volume,
    }


def infer(source, model: PipelineModel | str | Path, seed: int = 0) -> EnsemblePrediction:
    """Full pipeline on one acquisition: preprocess if needed, project,
    classify, attribute, select B-scans, classify them, fuse."""
    if not isinstance(model, PipelineModel):
        model, _ = load_checkpoint(model)
    volume = resolve_volume(source, model.pipeline_config)
    return pipeline_forward(volume, model, seed)["prediction"]
