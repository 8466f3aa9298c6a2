"""Static report rendering: exact-pixel PNGs, matplotlib figures, HTML index.

A report directory contains, for one acquisition:

    summary.png                   the en-face projection, pixel = round(255 * v)
    heatmap_cutoff{n}.png         jet-colored per-cutoff attribution maps
    bscan_cutoff{n}_z{zzz}.png    the selected B-scans, exact pixels
    overview.png                  annotated matplotlib panel of everything
    probabilities.csv             per-cutoff p1 / p2 / p and slice index
    index.html                    self-contained page referencing the above

The summary and B-scan PNGs carry the raw pixel values (no axes, no
rescaling) so downstream checks can compare them against the arrays they
were extracted from; annotations live in the overview figure, the file
names, and the HTML captions.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .attribution import AttributionMap, SelectedBScans
from .fusion import EnsemblePrediction

N_OUTPUTS = 4
CUTOFF_NAMES = (">= mild", ">= moderate", ">= severe", ">= proliferative")


def to_uint8(img01: np.ndarray) -> np.ndarray:
    """round(255 * v) on values in [0, 1]."""
    return np.clip(np.rint(255.0 * np.asarray(img01)), 0, 255).astype(np.uint8)


def save_image_png(img01: np.ndarray, path: str | Path) -> None:
    """Write a channels-first (3, H, W) or grayscale (H, W) [0, 1] image."""
    arr = np.asarray(img01)
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
    Image.fromarray(to_uint8(arr)).save(path)


def load_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path))


def bscan_to_image(bscan: np.ndarray) -> np.ndarray:
    """(3, X, Y1) slice -> (3, Y1, X) display image with depth running down."""
    return np.transpose(bscan, (0, 2, 1))


def save_heatmap_png(scores: np.ndarray, path: str | Path) -> None:
    """Jet-colored heatmap of a 2-D nonnegative score map."""
    scores = np.asarray(scores, dtype=float)
    vmax = scores.max() if scores.max() > 0 else 1.0
    plt.imsave(path, scores, cmap="jet", vmin=0.0, vmax=vmax)


_HTML_TEMPLATE = """<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>Report: {sample_id}</title>
<style>
body {{ font-family: sans-serif; margin: 2em; }}
img {{ image-rendering: pixelated; border: 1px solid #999; }}
table {{ border-collapse: collapse; }} td, th {{ border: 1px solid #999; padding: 4px 10px; }}
figure {{ display: inline-block; margin: 8px; text-align: center; }}
</style></head>
<body>
<h1>Acquisition {sample_id}</h1>
<h2>Predicted severity: grade {grade}</h2>
<table>
<tr><th>cutoff</th><th>p (summary branch)</th><th>p (B-scan branch)</th><th>p (fused)</th><th>slice z</th></tr>
{rows}
</table>
<h2>En-face summary</h2>
<figure><img src="summary.png" width="320"><figcaption>learned projection</figcaption></figure>
<h2>Attribution per cutoff</h2>
{heatmaps}
<h2>Selected B-scans</h2>
{bscans}
<h2>Overview</h2>
<img src="overview.png" width="1000">
</body></html>
"""


def write_report(out_dir: str | Path, sample_id: str, prediction: EnsemblePrediction,
                 summary: np.ndarray, amap: AttributionMap,
                 bscans: SelectedBScans) -> Path:
    """Render the full report directory; returns the index.html path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    save_image_png(summary, out_dir / "summary.png")

    heat_names, bscan_names = [], []
    per_cutoff_scores = np.abs(amap.a).sum(axis=2)          # (X, Z, N)
    for n in range(N_OUTPUTS):
        heat = out_dir / f"heatmap_cutoff{n + 1}.png"
        save_heatmap_png(per_cutoff_scores[:, :, n], heat)
        heat_names.append(heat.name)
        z = int(bscans.z_indices[n])
        name = out_dir / f"bscan_cutoff{n + 1}_z{z:03d}.png"
        save_image_png(bscan_to_image(bscans.slices[n]), name)
        bscan_names.append(name.name)

    p2 = prediction.p2 if prediction.p2 is not None else [float("nan")] * N_OUTPUTS
    with (out_dir / "probabilities.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cutoff", "p1", "p2", "p", "z_index"])
        for n in range(N_OUTPUTS):
            writer.writerow([CUTOFF_NAMES[n], f"{prediction.p1[n]:.6f}", f"{p2[n]:.6f}",
                             f"{prediction.p[n]:.6f}", int(bscans.z_indices[n])])

    _overview_figure(out_dir / "overview.png", sample_id, prediction, summary,
                     per_cutoff_scores, bscans)

    rows = "\n".join(
        f"<tr><td>{CUTOFF_NAMES[n]}</td><td>{prediction.p1[n]:.3f}</td>"
        f"<td>{p2[n]:.3f}</td><td>{prediction.p[n]:.3f}</td>"
        f"<td>{int(bscans.z_indices[n])}</td></tr>"
        for n in range(N_OUTPUTS))
    heatmaps = "\n".join(
        f'<figure><img src="{heat_names[n]}" width="240">'
        f"<figcaption>{CUTOFF_NAMES[n]}</figcaption></figure>"
        for n in range(N_OUTPUTS))
    bscans_html = "\n".join(
        f'<figure><img src="{bscan_names[n]}" width="240">'
        f"<figcaption>{CUTOFF_NAMES[n]} (z = {int(bscans.z_indices[n])})</figcaption></figure>"
        for n in range(N_OUTPUTS))
    index = out_dir / "index.html"
    index.write_text(_HTML_TEMPLATE.format(
        sample_id=sample_id, grade=int((np.asarray(prediction.p) >= 0.5).sum()),
        rows=rows, heatmaps=heatmaps, bscans=bscans_html))
    return index


def _overview_figure(path, sample_id, prediction, summary, per_cutoff_scores, bscans):
    fig, axes = plt.subplots(2, 5, figsize=(16, 6.5))
    axes[0, 0].imshow(np.transpose(summary, (1, 2, 0)))
    axes[0, 0].set_title("en-face summary")
    for n in range(N_OUTPUTS):
        ax = axes[0, n + 1]
        ax.imshow(per_cutoff_scores[:, :, n], cmap="jet")
        ax.set_title(f"attribution {CUTOFF_NAMES[n]}")
        z = int(bscans.z_indices[n])
        ax.axvline(z, color="white", lw=0.8, ls="--")
        bx = axes[1, n + 1]
        bx.imshow(np.transpose(bscan_to_image(bscans.slices[n]), (1, 2, 0)))
        bx.set_title(f"B-scan z={z} ({CUTOFF_NAMES[n]}, p={prediction.p[n]:.2f})")
    axes[1, 0].axis("off")
    lines = [f"{sample_id}", f"grade {(np.asarray(prediction.p) >= 0.5).sum()}"]
    for n in range(N_OUTPUTS):
        lines.append(f"{CUTOFF_NAMES[n]}: p={prediction.p[n]:.3f}")
    axes[1, 0].text(0.0, 0.5, "\n".join(lines), fontsize=11, va="center")
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(f"Acquisition {sample_id}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_roc_plot(roc_curves: dict, path: str | Path) -> None:
    """One axes with a named ROC curve per entry of {name: RocResult}."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, roc in roc_curves.items():
        ax.plot(roc.fpr, roc.tpr, label=f"{name} (AUC {roc.auc:.3f})")
    ax.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
