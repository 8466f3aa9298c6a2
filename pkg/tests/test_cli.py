import json
import re

import numpy as np
import pytest

from conftest import TINY_DIMS, TINY_PRE
from discover.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, load_config, main
from discover.report import load_png, to_uint8


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth + train run shared by the CLI tests (kept deliberately tiny)."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--n-per-grade", "2", "--dims", "16x32x16",
                 "--seed", "11", "--out", str(data)]) == EXIT_OK
    config = root / "config.json"
    config.write_text(json.dumps({
        "preprocess": {"y0": TINY_PRE.y0, "y1": TINY_PRE.y1},
        "projector": {"phi": 2},
        "ensemble": {"members": [{"name": "refcnn-a", "width": 4, "depth": 3},
                                 {"name": "refcnn-b", "width": 6, "depth": 3}]},
        "train": {"max_epochs": 1, "patience": 1, "batch_size": 4, "seed": 5},
    }))
    run = root / "run"
    assert main(["train", "--data", str(data), "--out", str(run),
                 "--config", str(config)]) == EXIT_OK
    return {"root": root, "data": data, "config": config, "run": run}


class TestSynth:
    def test_dataset_on_disk(self, workspace):
        data = workspace["data"]
        bundles = [p for p in data.iterdir() if (p / "meta.json").is_file()]
        assert len(bundles) == 10
        assert (data / "manifest.json").is_file()
        assert (data / "config_resolved.json").is_file()

    def test_same_seed_same_manifest(self, workspace, tmp_path):
        again = tmp_path / "again"
        assert main(["synth", "--n-per-grade", "2", "--dims", "16x32x16",
                     "--seed", "11", "--out", str(again)]) == EXIT_OK
        assert (again / "manifest.json").read_bytes() == \
            (workspace["data"] / "manifest.json").read_bytes()

    def test_bad_dims_exit_2(self, tmp_path):
        assert main(["synth", "--n-per-grade", "1", "--dims", "16x32",
                     "--out", str(tmp_path / "x")]) == EXIT_USAGE

    def test_bad_count_exit_2(self, tmp_path):
        assert main(["synth", "--n-per-grade", "0",
                     "--out", str(tmp_path / "x")]) == EXIT_USAGE


class TestPreprocessCommand:
    def test_writes_preprocessed_variant(self, workspace, tmp_path):
        src = workspace["data"] / "g2-i000"
        out = tmp_path / "pre"
        assert main(["preprocess", "--in", str(src), "--out", str(out),
                     "--y0", str(TINY_PRE.y0), "--y1", str(TINY_PRE.y1)]) == EXIT_OK
        meta = json.loads((out / "meta.json").read_text())
        assert meta["preprocessed"] is True
        assert meta["dims"] == [16, TINY_PRE.y1, 16]

    def test_invalid_depths_exit_2(self, workspace, tmp_path):
        src = workspace["data"] / "g2-i000"
        assert main(["preprocess", "--in", str(src), "--out", str(tmp_path / "p"),
                     "--y0", "30", "--y1", "20"]) == EXIT_USAGE


class TestTrainCommand:
    def test_checkpoint_written(self, workspace):
        assert (workspace["run"] / "checkpoint.pt").is_file()
        assert (workspace["run"] / "metrics.jsonl").is_file()
        assert (workspace["run"] / "config_resolved.json").is_file()

    def test_stage_c2_requires_from(self, workspace, tmp_path):
        assert main(["train", "--data", str(workspace["data"]), "--out",
                     str(tmp_path / "o"), "--stage", "c2"]) == EXIT_USAGE

    def test_staged_two_step(self, workspace, tmp_path):
        out_a = tmp_path / "stage-a"
        assert main(["train", "--data", str(workspace["data"]), "--out", str(out_a),
                     "--config", str(workspace["config"]), "--stage", "c1"]) == EXIT_OK
        out_b = tmp_path / "stage-b"
        assert main(["train", "--data", str(workspace["data"]), "--out", str(out_b),
                     "--config", str(workspace["config"]), "--stage", "c2",
                     "--from", str(out_a / "checkpoint.pt")]) == EXIT_OK
        import torch
        payload = torch.load(out_b / "checkpoint.pt", weights_only=False)
        assert payload["has_c2"]

    def test_unknown_config_key_exit_2(self, workspace, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"projectorr": {"phi": 2}}))
        assert main(["train", "--data", str(workspace["data"]),
                     "--out", str(tmp_path / "o"), "--config", str(bad)]) == EXIT_USAGE

    def test_toml_config_accepted(self, workspace, tmp_path):
        toml = tmp_path / "c.toml"
        toml.write_text("[projector]\nphi = 2\n")
        cfg = load_config(str(toml))
        assert cfg["projector"]["phi"] == 2


class TestInferCommand:
    def test_predictions_schema(self, workspace, tmp_path):
        out = tmp_path / "preds.json"
        assert main(["infer", "--in", str(workspace["data"]), "--split", "test",
                     "--ckpt", str(workspace["run"] / "checkpoint.pt"),
                     "--out", str(out), "--seed", "3"]) == EXIT_OK
        payload = json.loads(out.read_text())
        assert payload["seed"] == 3
        assert payload["predictions"]
        for row in payload["predictions"]:
            assert set(row) == {"id", "p1", "p2", "p", "z_indices", "grade"}
            assert len(row["p"]) == 4

    def test_byte_identical_reruns(self, workspace, tmp_path):
        args = ["infer", "--in", str(workspace["data"] / "g3-i001"),
                "--ckpt", str(workspace["run"] / "checkpoint.pt"), "--seed", "9"]
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(args + ["--out", str(a)]) == EXIT_OK
        assert main(args + ["--out", str(b)]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_missing_checkpoint_exit_3(self, workspace, tmp_path):
        assert main(["infer", "--in", str(workspace["data"] / "g3-i001"),
                     "--ckpt", str(tmp_path / "nope.pt"),
                     "--out", str(tmp_path / "p.json")]) == EXIT_RUNTIME

    def test_env_seed_fallback(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("DISCOVER_SEED", "77")
        out = tmp_path / "env.json"
        assert main(["infer", "--in", str(workspace["data"] / "g0-i000"),
                     "--ckpt", str(workspace["run"] / "checkpoint.pt"),
                     "--out", str(out)]) == EXIT_OK
        assert json.loads(out.read_text())["seed"] == 77


@pytest.fixture(scope="module")
def report(workspace, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("eval")
    preds = tmp / "preds.json"
    assert main(["infer", "--in", str(workspace["data"]),
                 "--ckpt", str(workspace["run"] / "checkpoint.pt"),
                 "--out", str(preds), "--seed", "1"]) == EXIT_OK
    out = tmp / "report.json"
    assert main(["eval", "--pred", str(preds),
                 "--labels", str(workspace["data"] / "manifest.json"),
                 "--out", str(out), "--plot-dir", str(tmp / "plots")]) == EXIT_OK
    return tmp, json.loads(out.read_text())


class TestEvalCommand:
    def test_report_schema(self, report):
        _, data = report
        assert set(data["per_cutoff_auc"]) == {"p", "p1"}
        assert len(data["per_cutoff_auc"]["p"]) == 4
        assert data["comparisons"], "expected branch comparisons when p2 present"
        tests_run = {c["test"] for c in data["comparisons"]}
        assert tests_run == {"delong_micro_roc", "wilcoxon_signed_rank"}
        assert "micro_auc" in data
        for curve in data["roc_points"].values():
            assert curve["fpr"][0] == 0.0 and curve["fpr"][-1] == 1.0

    def test_roc_plots_rendered(self, report):
        tmp, _ = report
        assert (tmp / "plots" / "roc_per_cutoff.png").is_file()
        assert (tmp / "plots" / "roc_micro.png").is_file()


@pytest.fixture(scope="module")
def rendered(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("report") / "r"
    bundle = workspace["data"] / "g4-i000"
    assert main(["report", "--in", str(bundle),
                 "--ckpt", str(workspace["run"] / "checkpoint.pt"),
                 "--out", str(out), "--seed", "2"]) == EXIT_OK
    return out, bundle


class TestReportCommand:
    def test_file_census(self, rendered):
        out, _ = rendered
        assert len(list(out.glob("bscan_cutoff*.png"))) == 4
        assert len(list(out.glob("heatmap_cutoff*.png"))) == 4
        assert (out / "summary.png").is_file()
        assert (out / "overview.png").is_file()
        assert (out / "probabilities.csv").is_file()
        assert (out / "index.html").is_file()

    def test_bscan_png_matches_extracted_slice(self, rendered):
        out, bundle = rendered
        from discover.octa_store import read_bundle
        from discover.preprocess import PreprocessConfig, preprocess_bundle

        prediction = json.loads((out / "prediction.json").read_text())
        volume = preprocess_bundle(read_bundle(bundle),
                                   PreprocessConfig(TINY_PRE.y0, TINY_PRE.y1))
        for n, z in enumerate(prediction["z_indices"], start=1):
            png = load_png(out / f"bscan_cutoff{n}_z{z:03d}.png")
            slice_img = np.transpose(volume.data[:, :, :, z], (2, 1, 0))  # (Y1, X, 3)
            assert np.array_equal(png, to_uint8(slice_img))

    def test_html_references_stay_inside_directory(self, rendered):
        out, _ = rendered
        html = (out / "index.html").read_text()
        refs = re.findall(r'(?:src|href)="([^"]+)"', html)
        assert refs
        for ref in refs:
            assert "://" not in ref and not ref.startswith("/")
            assert (out / ref).is_file()

    def test_probabilities_csv_consistent(self, rendered):
        out, _ = rendered
        rows = (out / "probabilities.csv").read_text().strip().splitlines()
        assert rows[0] == "cutoff,p1,p2,p,z_index"
        assert len(rows) == 5
