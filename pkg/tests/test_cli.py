"""End-to-end tests of the command-line interface."""

from __future__ import annotations

import csv
import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from broadcam.bls import load_model
from broadcam.cam import load_cam
from broadcam.cli import main
from broadcam.pipeline import DEFAULT_PROPORTIONS
from broadcam.synth import load_gd_classifier
from broadcam.tensor_io import load_manifest


def run_cli(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def file_digests(directory: Path) -> dict[str, str]:
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(Path(directory).iterdir())
        if p.is_file()
    }


def read_csv_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def bls_model_dir(tmp_path_factory, small_dataset_dir):
    out = tmp_path_factory.mktemp("model") / "bls"
    result = run_cli("fit", "--manifest", small_dataset_dir, "--layers", "3,4", "--out", out)
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def four_layer_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("fourlayer") / "data"
    result = run_cli(
        "synth", "--out", out, "--seed", 2, "--num-samples", 14, "--num-classes", 2,
        "--num-val", 4, "--relevant-per-class", 1,
        "--layer", "1,4,8,8", "--layer", "2,4,8,8", "--layer", "3,4,4,4", "--layer", "4,4,4,4",
    )
    assert result.exit_code == 0, result.output
    return out / "manifest.json"


class TestSynthCommand:
    def test_writes_loadable_dataset(self, tmp_path):
        out = tmp_path / "ds"
        result = run_cli(
            "synth", "--out", out, "--seed", 3, "--num-samples", 8, "--num-classes", 2,
            "--num-val", 2, "--relevant-per-class", 1,
            "--layer", "3,4,8,8", "--layer", "4,4,4,4,0.5", "--noise-std", 0.3,
        )
        assert result.exit_code == 0, result.output
        manifest = load_manifest(out / "manifest.json")
        assert [len(manifest.splits[s]) for s in ("train", "val", "test")] == [6, 2, 0]
        assert manifest.layer_shapes == {3: (4, 8, 8), 4: (4, 4, 4)}
        assert (out / "features" / "s00000.layer3.npy").exists()
        meta = json.loads((out / "synth.json").read_text())
        assert meta["noise_std"] == 0.3
        assert meta["layers"][1]["strength"] == 0.5

    def test_bad_layer_spec_rejected(self, tmp_path):
        result = run_cli("synth", "--out", tmp_path / "x", "--layer", "3,4")
        assert result.exit_code != 0

    def test_invalid_config_is_a_clean_failure(self, tmp_path):
        result = run_cli("synth", "--out", tmp_path / "x", "--num-samples", 4, "--num-val", 4)
        assert result.exit_code == 1
        assert "training" in result.output


class TestFitCommand:
    def test_rerun_writes_identical_model(self, small_dataset_dir, tmp_path):
        first = run_cli("fit", "--manifest", small_dataset_dir, "--out", tmp_path / "a")
        second = run_cli("fit", "--manifest", small_dataset_dir, "--out", tmp_path / "b")
        assert first.exit_code == 0 and second.exit_code == 0
        assert file_digests(tmp_path / "a") == file_digests(tmp_path / "b")

    def test_model_round_trips(self, bls_model_dir):
        model = load_model(bls_model_dir)
        assert model.cam_weights.shape == (12, 3)
        assert model.layer_offsets == {3: (0, 6), 4: (6, 12)}
        assert model.class_names == ["class0", "class1", "class2"]

    def test_fit_header_hashes_inputs(self, bls_model_dir):
        header = json.loads((bls_model_dir / "fit.json").read_text())
        assert header["command"] == "fit"
        assert header["params"]["method"] == "broadcam"
        assert all(len(h) == 64 for h in header["inputs"].values())

    def test_missing_layer_file_names_the_sample(self, small_dataset_dir, tmp_path):
        broken = tmp_path / "broken"
        shutil.copytree(small_dataset_dir.parent, broken)
        (broken / "features" / "s00005.layer3.npy").unlink()
        result = run_cli("fit", "--manifest", broken / "manifest.json", "--out", tmp_path / "m")
        assert result.exit_code == 1
        assert "s00005" in result.output

    def test_gd_fit_records_training_metadata(self, small_dataset_dir, tmp_path):
        out = tmp_path / "gd"
        result = run_cli(
            "fit", "--manifest", small_dataset_dir, "--method", "gd-baseline",
            "--gd-epochs", 3, "--gd-lr", 0.1, "--gd-seed", 5, "--out", out,
        )
        assert result.exit_code == 0, result.output
        meta = json.loads((out / "model.json").read_text())
        assert meta["method"] == "gd-baseline"
        assert (meta["epochs"], meta["lr"], meta["seed"]) == (3, 0.1, 5)
        assert len(meta["losses"]) == 3
        model = load_gd_classifier(out)
        assert model.cam_weights.shape == (12, 3)

    def test_unknown_layer_is_fatal(self, small_dataset_dir, tmp_path):
        result = run_cli("fit", "--manifest", small_dataset_dir, "--layers", "9", "--out", tmp_path / "m")
        assert result.exit_code == 1


class TestBuildZ:
    def test_writes_pooled_matrix(self, small_dataset_dir, tmp_path):
        out = tmp_path / "z"
        result = run_cli("build-z", "--manifest", small_dataset_dir, "--split", "val", "--out", out)
        assert result.exit_code == 0, result.output
        Z = np.load(out / "Z.npy")
        assert Z.shape == (8, 12)
        meta = json.loads((out / "broad_matrix.json").read_text())
        assert meta["sample_ids"] == [f"s{i:05d}" for i in range(12, 20)]


class TestCamCommand:
    def test_writes_one_seed_per_sample(self, small_dataset_dir, bls_model_dir, tmp_path):
        out = tmp_path / "cams"
        result = run_cli(
            "cam", "--manifest", small_dataset_dir, "--model", bls_model_dir,
            "--split", "val", "--out", out,
        )
        assert result.exit_code == 0, result.output
        files = sorted(out.glob("*.cam.npy"))
        assert len(files) == 8
        seed = load_cam(out / "s00012.cam.npy", "s00012")
        assert seed.maps.shape == (3, 8, 8)  # finest selected layer
        assert seed.maps.dtype == np.float32
        assert (out / "cams.json").exists()
        assert (out / "seed_grid.png").exists()

    def test_grid_can_be_disabled(self, small_dataset_dir, bls_model_dir, tmp_path):
        out = tmp_path / "cams"
        result = run_cli(
            "cam", "--manifest", small_dataset_dir, "--model", bls_model_dir,
            "--split", "val", "--grid-samples", 0, "--out", out,
        )
        assert result.exit_code == 0
        assert not (out / "seed_grid.png").exists()


class TestEvalCommand:
    def test_report_contents(self, small_dataset_dir, bls_model_dir, tmp_path):
        out = tmp_path / "eval"
        result = run_cli(
            "eval", "--manifest", small_dataset_dir, "--model", bls_model_dir,
            "--split", "val", "--out", out,
        )
        assert result.exit_code == 0, result.output
        report = json.loads((out / "report.json").read_text())
        assert report["num_samples"] == 8
        assert 0.0 <= report["best_miou"] <= 1.0
        assert report["best_threshold"] in [round(0.05 * i, 2) for i in range(1, 20)]
        assert "mean_pixel_ap" in report
        curve = read_csv_rows(out / "threshold_curve.csv")
        assert len(curve) == 19
        assert (out / "threshold_curve.png").exists()
        assert "peak mIoU" in result.output

    def test_mpxap_can_be_skipped(self, small_dataset_dir, bls_model_dir, tmp_path):
        out = tmp_path / "eval"
        result = run_cli(
            "eval", "--manifest", small_dataset_dir, "--model", bls_model_dir,
            "--split", "val", "--no-mpxap", "--out", out,
        )
        assert result.exit_code == 0
        report = json.loads((out / "report.json").read_text())
        assert "mean_pixel_ap" not in report

    def test_custom_threshold_list(self, small_dataset_dir, bls_model_dir, tmp_path):
        out = tmp_path / "eval"
        result = run_cli(
            "eval", "--manifest", small_dataset_dir, "--model", bls_model_dir,
            "--split", "val", "--thresholds", "0.25,0.5,0.75", "--out", out,
        )
        assert result.exit_code == 0
        assert len(read_csv_rows(out / "threshold_curve.csv")) == 3


class TestGamutCommand:
    def test_default_proportions(self):
        assert DEFAULT_PROPORTIONS == (0.01, 0.02, 0.05, 0.08, 0.10, 0.20, 0.50, 0.80, 1.00)

    def test_one_cell_one_row_per_split_and_metric(self, small_dataset_dir, tmp_path):
        out = tmp_path / "gamut"
        result = run_cli(
            "gamut", "--manifest", small_dataset_dir, "--proportions", "1.0", "--seeds", "0",
            "--out", out,
        )
        assert result.exit_code == 0, result.output
        rows = read_csv_rows(out / "gamut.csv")
        assert len(rows) == 3  # one val split x {miou, fwiou, mpxap}
        assert {r["metric"] for r in rows} == {"miou", "fwiou", "mpxap"}
        for row in rows:
            assert row["method"] == "broadcam"
            assert row["split"] == "val"
            assert row["n_train"] == "12"
            assert len(row["subset_sha256"]) == 16
            assert 0.0 <= float(row["value"]) <= 1.0
            assert row["error"] == ""
        assert (out / "gamut_miou.png").exists()
        assert (out / "gamut_fwiou.png").exists()
        assert (out / "gamut_mpxap.png").exists()

    def test_two_seeds_draw_distinct_subsets(self, small_dataset_dir, tmp_path):
        out = tmp_path / "gamut"
        result = run_cli(
            "gamut", "--manifest", small_dataset_dir, "--proportions", "0.5", "--seeds", "0,1",
            "--out", out,
        )
        assert result.exit_code == 0, result.output
        rows = read_csv_rows(out / "gamut.csv")
        assert len(rows) == 6
        hashes = {r["seed"]: r["subset_sha256"] for r in rows}
        assert len(hashes) == 2
        assert hashes["0"] != hashes["1"]

    def test_rerun_byte_identical(self, small_dataset_dir, tmp_path):
        args = ("gamut", "--manifest", small_dataset_dir, "--proportions", "0.5,1.0", "--seeds", "0")
        run_cli(*args, "--out", tmp_path / "a")
        run_cli(*args, "--out", tmp_path / "b")
        assert (tmp_path / "a" / "gamut.csv").read_bytes() == (tmp_path / "b" / "gamut.csv").read_bytes()
        assert (tmp_path / "a" / "gamut.json").read_bytes() == (tmp_path / "b" / "gamut.json").read_bytes()

    def test_failing_cell_keeps_run_alive_and_exits_2(self, small_dataset_dir, tmp_path):
        out = tmp_path / "gamut"
        result = run_cli(
            "gamut", "--manifest", small_dataset_dir, "--proportions", "0.01,1.0", "--seeds", "0",
            "--out", out,
        )
        assert result.exit_code == 2
        rows = read_csv_rows(out / "gamut.csv")
        assert len(rows) == 4  # 3 metric rows + 1 error row
        errors = [r for r in rows if r["error"]]
        assert len(errors) == 1
        assert "EmptySubsetError" in errors[0]["error"]
        assert errors[0]["proportion"] == "0.01"
        assert "1 failed cells" in result.output

    def test_gd_baseline_method(self, small_dataset_dir, tmp_path):
        out = tmp_path / "gamut"
        result = run_cli(
            "gamut", "--manifest", small_dataset_dir, "--method", "gd-baseline",
            "--proportions", "1.0", "--seeds", "0", "--out", out,
        )
        assert result.exit_code == 0, result.output
        rows = read_csv_rows(out / "gamut.csv")
        assert {r["method"] for r in rows} == {"gd-baseline"}


class TestAblateCommand:
    def test_two_layer_sets_two_groups(self, small_dataset_dir, tmp_path):
        out = tmp_path / "ablate"
        result = run_cli(
            "ablate", "--manifest", small_dataset_dir, "--layer-sets", "4;3,4", "--out", out,
        )
        assert result.exit_code == 0, result.output
        rows = read_csv_rows(out / "ablation.csv")
        assert len(rows) == 6
        assert {r["layers"] for r in rows} == {"4", "3+4"}
        assert (out / "ablation_miou.png").exists()

    def test_seven_singleton_and_combined_sets(self, four_layer_manifest, tmp_path):
        out = tmp_path / "ablate"
        result = run_cli(
            "ablate", "--manifest", four_layer_manifest,
            "--layer-sets", "1;2;3;4;3,4;2,3,4;1,2,3,4", "--out", out,
        )
        assert result.exit_code == 0, result.output
        rows = read_csv_rows(out / "ablation.csv")
        assert len(rows) == 21
        assert {r["layers"] for r in rows} == {"1", "2", "3", "4", "3+4", "2+3+4", "1+2+3+4"}
        for row in rows:
            assert row["error"] == ""
            assert 0.0 <= float(row["value"]) <= 1.0

    def test_duplicate_layer_in_set_is_fatal(self, small_dataset_dir, tmp_path):
        result = run_cli(
            "ablate", "--manifest", small_dataset_dir, "--layer-sets", "3,3", "--out", tmp_path / "x",
        )
        assert result.exit_code == 1
        assert "DuplicateLayer" in result.output


class TestAnalyzeCommand:
    def test_topk_defaults_clip_to_channel_count(self, small_dataset_dir, bls_model_dir, tmp_path):
        out = tmp_path / "analysis"
        result = run_cli(
            "analyze", "--manifest", small_dataset_dir, "--model", bls_model_dir,
            "--n-groups", "4", "--out", out,
        )
        assert result.exit_code == 0, result.output
        analysis = json.loads((out / "analysis.json").read_text())
        # 20, 200 and 2000 all clip to the 12 available channels
        assert [entry["k"] for entry in analysis["topk"]] == [12]
        assert analysis["n_groups"] == 4
        assert len(analysis["classes"]) == 3
        for cls in analysis["classes"]:
            assert sum(cls["group_sizes"]) == 12
            assert len(cls["group_positive_weights"]) == 4

        sidecar = json.loads((out / "topk" / "top12.json").read_text())
        assert sidecar["k"] == 12
        assert sidecar["class"] == 0
        assert sorted(sidecar["retained_channel_indices"]) == list(range(12))

        # default sample selection: first four ids of the split, rendered
        # at the finest selected layer like the cam command
        for sid in ("s00012", "s00013", "s00014", "s00015"):
            seed = load_cam(out / "topk" / f"{sid}.top12.npy", sid)
            assert seed.maps.shape == (1, 8, 8)

        assert len(read_csv_rows(out / "channel_relevance.csv")) == 36
        assert len(read_csv_rows(out / "relevance_groups.csv")) == 12
        assert len(read_csv_rows(out / "topk.csv")) == 1
        for name in ("relevance_groups.png", "topk_miou.png", "seed_grid.png"):
            assert (out / name).exists()

    def test_default_sixteen_groups(self, four_layer_manifest, tmp_path):
        model_dir = tmp_path / "model"
        fit = run_cli("fit", "--manifest", four_layer_manifest, "--layers", "1,2,3,4", "--out", model_dir)
        assert fit.exit_code == 0, fit.output
        out = tmp_path / "analysis"
        result = run_cli(
            "analyze", "--manifest", four_layer_manifest, "--model", model_dir,
            "--topk", "2,16", "--out", out,
        )
        assert result.exit_code == 0, result.output
        analysis = json.loads((out / "analysis.json").read_text())
        assert analysis["n_groups"] == 16
        for cls in analysis["classes"]:
            assert cls["group_sizes"] == [1] * 16
        assert [entry["k"] for entry in analysis["topk"]] == [2, 16]
        retained_small = json.loads((out / "topk" / "top2.json").read_text())
        retained_full = json.loads((out / "topk" / "top16.json").read_text())
        assert set(retained_small["retained_channel_indices"]) <= set(
            retained_full["retained_channel_indices"]
        )

    def test_planted_relevance_source(self, small_dataset_dir, bls_model_dir, tmp_path):
        out = tmp_path / "analysis"
        result = run_cli(
            "analyze", "--manifest", small_dataset_dir, "--model", bls_model_dir,
            "--relevance", "planted", "--n-groups", "3", "--topk", "6", "--out", out,
        )
        assert result.exit_code == 0, result.output
        analysis = json.loads((out / "analysis.json").read_text())
        assert analysis["relevance_source"] == "planted"
        assert all(-1.0 <= cls["pearson_r"] <= 1.0 for cls in analysis["classes"])

    def test_explicit_sample_ids(self, small_dataset_dir, bls_model_dir, tmp_path):
        out = tmp_path / "analysis"
        result = run_cli(
            "analyze", "--manifest", small_dataset_dir, "--model", bls_model_dir,
            "--samples", "s00017,s00019", "--class-k", "2", "--n-groups", "4",
            "--topk", "5", "--out", out,
        )
        assert result.exit_code == 0, result.output
        assert (out / "topk" / "s00017.top5.npy").exists()
        assert (out / "topk" / "s00019.top5.npy").exists()
        sidecar = json.loads((out / "topk" / "top5.json").read_text())
        assert sidecar["class"] == 2
        assert len(sidecar["retained_channel_indices"]) == 5

    def test_unknown_sample_id_is_fatal(self, small_dataset_dir, bls_model_dir, tmp_path):
        result = run_cli(
            "analyze", "--manifest", small_dataset_dir, "--model", bls_model_dir,
            "--samples", "nope", "--n-groups", "4", "--out", tmp_path / "x",
        )
        assert result.exit_code == 1

    def test_class_index_out_of_range_is_fatal(self, small_dataset_dir, bls_model_dir, tmp_path):
        result = run_cli(
            "analyze", "--manifest", small_dataset_dir, "--model", bls_model_dir,
            "--class-k", "7", "--n-groups", "4", "--out", tmp_path / "x",
        )
        assert result.exit_code == 1
