"""Command-line surface: synth, preprocess, train, infer, eval, report.

Hyperparameters come from one TOML or JSON config file (unknown keys are
rejected); command flags override it. Every run writes a
config_resolved.json snapshot next to its outputs so results can be
reproduced bit for bit. The seed is resolved as: --seed flag, then the
config file, then the DISCOVER_SEED environment variable, then 0.

Exit codes: 0 success, 2 usage/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class CliError(Exception):
    """Usage or configuration problem (exit code 2)."""


_DEFAULT_CONFIG = {
    "preprocess": {"y0": 8, "y1": 56},
    "projector": {"phi": 4, "use_skip": False, "kernel_depth": 3},
    "ensemble": {
        "members": [
            {"name": "refcnn-a", "width": 8, "depth": 4, "n_outputs": 4},
            {"name": "refcnn-b", "width": 12, "depth": 4, "n_outputs": 4},
            {"name": "refcnn-c", "width": 16, "depth": 4, "n_outputs": 4},
        ],
        "mode": "logit",
        "dropout": "uniform_subset",
        "inference_draws": 1,
        "augment": {"rotation": 10.0, "translate": 0.10, "scale": 0.10, "hflip": True},
    },
    "selection": {"attribution": "guided_backprop", "bscan_selection": "multinomial"},
    "train": {"schedule": "two_step", "lr": 1e-3, "lr_decay": 0.99, "max_epochs": 60,
              "batch_size": 8, "patience": 10, "seed": None},
}

_MEMBER_KEYS = {"name", "width", "depth", "n_outputs"}


def _load_config_file(path: Path) -> dict:
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    if path.suffix == ".json":
        return json.loads(path.read_text())
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with path.open("rb") as fh:
            return tomllib.load(fh)
    raise CliError(f"config file must be .toml or .json, got {path.name}")


def _merge_config(defaults: dict, override: dict, prefix: str = "") -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{prefix}{key}"
        if key not in defaults:
            raise CliError(f"unknown config key {where!r}")
        if key == "members":
            if not isinstance(value, list) or not value:
                raise CliError("ensemble.members must be a non-empty list")
            for m in value:
                bad = set(m) - _MEMBER_KEYS
                if bad:
                    raise CliError(f"unknown member keys {sorted(bad)}")
            merged[key] = value
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise CliError(f"config key {where!r} must be a table")
            merged[key] = _merge_config(defaults[key], value, prefix=f"{where}.")
        else:
            merged[key] = value
    return merged


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(_DEFAULT_CONFIG)
    return _merge_config(_DEFAULT_CONFIG, _load_config_file(Path(path)))


def resolve_seed(flag_seed, config: dict | None = None) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    if config is not None and config.get("train", {}).get("seed") is not None:
        return int(config["train"]["seed"])
    env = os.environ.get("DISCOVER_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(f"DISCOVER_SEED must be an integer, got {env!r}") from exc
    return 0


def _to_pipeline_config(config: dict):
    from .ensemble import AugmentConfig, BackboneSpec
    from .preprocess import PreprocessConfig
    from .projector import ProjectorConfig
    from .train import PipelineConfig

    ens = config["ensemble"]
    try:
        pipeline = PipelineConfig(
            preprocess=PreprocessConfig(**config["preprocess"]),
            projector=ProjectorConfig(**config["projector"]),
            members=[BackboneSpec(**m) for m in ens["members"]],
            mode=ens["mode"],
            augment=AugmentConfig(**ens["augment"]),
            dropout_mode=ens["dropout"],
            inference_draws=int(ens["inference_draws"]),
            attribution=config["selection"]["attribution"],
        )
        pipeline.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    return pipeline


def _to_train_config(config: dict, seed: int):
    from .train import TrainConfig

    t = config["train"]
    try:
        train_config = TrainConfig(
            schedule=t["schedule"], lr=float(t["lr"]), lr_decay=float(t["lr_decay"]),
            max_epochs=int(t["max_epochs"]), batch_size=int(t["batch_size"]),
            patience=int(t["patience"]), seed=seed,
            bscan_selection=config["selection"]["bscan_selection"],
        )
        train_config.validate()
    except (TypeError, ValueError, KeyError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    return train_config


def write_snapshot(directory: Path, command: str, seed: int, config: dict,
                   extra: dict | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, "argv": sys.argv[1:], "seed": seed,
                "config": config, **(extra or {})}
    (directory / "config_resolved.json").write_text(json.dumps(snapshot, indent=2) + "\n")


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise CliError(f"dims must look like 64x96x64, got {text!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise CliError(f"dims must be integers, got {text!r}") from exc
    if any(d < 1 for d in dims):
        raise CliError(f"dims must be positive, got {text!r}")
    return dims


# --- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthgen import generate_dataset

    if args.n_per_grade < 1:
        raise CliError("--n-per-grade must be >= 1")
    dims = _parse_dims(args.dims)
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    try:
        manifest = generate_dataset(args.n_per_grade, dims=dims, seed=seed,
                                    noise_level=args.noise_level, out_dir=out)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    write_snapshot(out, "synth", seed, {
        "n_per_grade": args.n_per_grade, "dims": list(dims),
        "noise_level": args.noise_level})
    print(f"wrote {len(manifest.bundles)} bundles and manifest.json to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .octa_store import read_bundle
    from .preprocess import PreprocessConfig, preprocess_bundle, write_preprocessed

    try:
        config = PreprocessConfig(y0=args.y0, y1=args.y1)
        config.validate()
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    bundle = read_bundle(args.input)
    volume = preprocess_bundle(bundle, config)
    out = Path(args.out)
    write_preprocessed(volume, out)
    write_snapshot(out, "preprocess", 0, {"y0": args.y0, "y1": args.y1,
                                          "input": str(args.input)})
    print(f"preprocessed {bundle.id}: {volume.data.shape} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from .synthgen import load_manifest
    from .train import (PipelineModel, load_checkpoint, load_samples, save_checkpoint,
                        train, train_stage)

    config = load_config(args.config)
    seed = resolve_seed(args.seed, config)
    pipeline = _to_pipeline_config(config)
    train_config = _to_train_config(config, seed)
    data_dir, out_dir = Path(args.data), Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_snapshot(out_dir, "train", seed, config, {"stage": args.stage})

    if args.stage is None:
        summary = train(data_dir, out_dir, pipeline, train_config)
    else:
        manifest = load_manifest(data_dir / "manifest.json")
        if args.stage == "c2":
            if args.from_checkpoint is None:
                raise CliError("--stage c2 requires --from <checkpoint>")
            model, _ = load_checkpoint(args.from_checkpoint)
            pipeline = model.pipeline_config
        else:
            torch.manual_seed(seed)
            model = PipelineModel(pipeline, with_c2=False)
        train_samples = load_samples(data_dir, manifest, "train", pipeline.preprocess)
        val_samples = load_samples(data_dir, manifest, "val", pipeline.preprocess)
        metrics_log: list = []
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")
        best = train_stage(model, args.stage, train_samples, val_samples, train_config,
                           metrics_log, metrics_path)
        save_checkpoint(out_dir / "checkpoint.pt", model, train_config)
        summary = {"stage": args.stage, "best_val_mean_auc": best,
                   "checkpoint": str(out_dir / "checkpoint.pt")}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _iter_inference_inputs(in_path: Path, split: str | None):
    from .synthgen import load_manifest

    manifest_path = in_path / "manifest.json"
    if manifest_path.is_file():
        manifest = load_manifest(manifest_path)
        for entry in manifest.bundles:
            if split is None or entry["split"] == split:
                yield entry["id"], in_path / entry["id"]
    elif (in_path / "meta.json").is_file():
        yield in_path.name, in_path
    else:
        raise CliError(f"{in_path} is neither a bundle nor a dataset directory")


def cmd_infer(args) -> int:
    from .train import infer, load_checkpoint

    seed = resolve_seed(args.seed)
    model, _ = load_checkpoint(args.ckpt)
    in_path = Path(args.input)
    predictions = []
    for sample_id, bundle_path in _iter_inference_inputs(in_path, args.split):
        pred = infer(bundle_path, model, seed=seed)
        predictions.append({"id": sample_id, **pred.to_json()})
    payload = {
        "format": "discover-predictions/1",
        "checkpoint": str(args.ckpt),
        "seed": seed,
        "predictions": predictions,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2) + "\n")
    write_snapshot(out.parent, "infer", seed, {"ckpt": str(args.ckpt),
                                               "input": str(in_path),
                                               "split": args.split})
    print(f"wrote {len(predictions)} predictions to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import delong_test, micro_average_roc, roc_auc, wilcoxon_signed_rank
    from .octa_store import encode_labels
    from .synthgen import load_manifest

    preds_path = Path(args.pred)
    if not preds_path.is_file():
        raise CliError(f"predictions file not found: {preds_path}")
    payload = json.loads(preds_path.read_text())
    manifest = load_manifest(args.labels)
    grades = {e["id"]: int(e["grade"]) for e in manifest.bundles}

    rows = payload["predictions"]
    missing = [r["id"] for r in rows if r["id"] not in grades]
    if missing:
        raise CliError(f"predictions contain ids absent from the manifest: {missing[:5]}")
    labels = np.stack([encode_labels(grades[r["id"]]) for r in rows])
    p = np.array([r["p"] for r in rows])
    p1 = np.array([r["p1"] for r in rows])
    has_p2 = all(r.get("p2") is not None for r in rows)

    n_cutoffs = labels.shape[1]
    report = {"n_samples": len(rows), "per_cutoff_auc": {}, "mean_auc": {},
              "roc_points": {}, "comparisons": []}
    curves = {}
    for name, arr in (("p", p), ("p1", p1)) if has_p2 else (("p", p),):
        aucs = [roc_auc(arr[:, n], labels[:, n]).auc for n in range(n_cutoffs)]
        report["per_cutoff_auc"][name] = aucs
        report["mean_auc"][name] = float(np.mean(aucs))
    for n in range(n_cutoffs):
        roc = roc_auc(p[:, n], labels[:, n])
        curves[f"cutoff_{n + 1}"] = roc
        report["roc_points"][f"cutoff_{n + 1}"] = {
            "fpr": roc.fpr.tolist(), "tpr": roc.tpr.tolist(), "auc": roc.auc}
    micro = micro_average_roc([p[:, n] for n in range(n_cutoffs)],
                              [labels[:, n] for n in range(n_cutoffs)])
    report["micro_auc"] = micro.auc

    if has_p2:
        pooled_labels = labels.T.reshape(-1)
        delong = delong_test(p1.T.reshape(-1), p.T.reshape(-1), pooled_labels)
        report["comparisons"].append({
            "name": "summary_branch_vs_fused", "test": "delong_micro_roc",
            "auc_a": delong.auc_a, "auc_b": delong.auc_b, "z": delong.z, "p": delong.p})
        pairs = list(zip(report["per_cutoff_auc"]["p1"], report["per_cutoff_auc"]["p"]))
        wil = wilcoxon_signed_rank(pairs)
        report["comparisons"].append({
            "name": "summary_branch_vs_fused_auc", "test": "wilcoxon_signed_rank",
            "w": wil.w, "p": wil.p, "n": wil.n_used})

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    if args.plot_dir is not None:
        from .report import render_roc_plot
        plot_dir = Path(args.plot_dir)
        plot_dir.mkdir(parents=True, exist_ok=True)
        render_roc_plot(curves, plot_dir / "roc_per_cutoff.png")
        render_roc_plot({"micro-average": micro}, plot_dir / "roc_micro.png")
    write_snapshot(out.parent, "eval", 0, {"pred": str(preds_path),
                                           "labels": str(args.labels)})
    print(json.dumps({k: report[k] for k in ("per_cutoff_auc", "mean_auc", "micro_auc")},
                     indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import write_report
    from .train import load_checkpoint, pipeline_forward, resolve_volume

    seed = resolve_seed(args.seed)
    model, _ = load_checkpoint(args.ckpt)
    volume = resolve_volume(args.input, model.pipeline_config)
    result = pipeline_forward(volume, model, seed=seed)
    out = Path(args.out)
    sample_id = volume.provenance.get("id", Path(args.input).name)
    index = write_report(out, sample_id, result["prediction"], result["summary"],
                         result["attribution"], result["bscans"])
    (out / "prediction.json").write_text(
        json.dumps({"id": sample_id, **result["prediction"].to_json()}, indent=2) + "\n")
    write_snapshot(out, "report", seed, {"ckpt": str(args.ckpt), "input": str(args.input)})
    print(f"report written to {index}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="discover",
        description="Ordinal severity grading of multi-channel OCTA volumes via a "
                    "trainable en-face projection and attribution-selected B-scans.",
        epilog="Config file defaults:\n" + json.dumps(_DEFAULT_CONFIG, indent=2),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled phantom dataset")
    p.add_argument("--n-per-grade", type=int, required=True)
    p.add_argument("--dims", default="64x96x64", help="volume size as XxYxZ")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise-level", type=float, default=0.02)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="mask, flatten, and crop one bundle")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--y0", type=int, default=8)
    p.add_argument("--y1", type=int, default=56)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the pipeline on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="TOML or JSON hyperparameter file")
    p.add_argument("--stage", choices=("c1", "c2", "joint"), default=None,
                   help="run one schedule phase; omit to run the configured schedule")
    p.add_argument("--from", dest="from_checkpoint", default=None,
                   help="checkpoint to continue from (required for --stage c2)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict severities for a bundle or dataset")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="predictions JSON path")
    p.add_argument("--split", default=None, help="restrict a dataset to one split")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a manifest")
    p.add_argument("--pred", required=True)
    p.add_argument("--labels", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="evaluation report JSON path")
    p.add_argument("--plot-dir", default=None, help="also render ROC curve PNGs here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render the human-readable report for one bundle")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit code 3
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
