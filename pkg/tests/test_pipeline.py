import csv
import json
from pathlib import Path

import numpy as np
import pytest

from pcoseg.classify import AreaRecord, CutoffCurve, CutoffPoint
from pcoseg.cli import main as cli_main
from pcoseg.dataset import SynthDatasetSpec
from pcoseg.metrics import ConfusionCounts
from pcoseg.pipeline import (
    PipelineError,
    RunConfig,
    emit_curves,
    emit_scatter,
    read_curve_csv,
    run_pipeline,
    stage_evaluate,
    stage_gt2,
    stage_synth,
)
from pcoseg.training import TrainConfig
from pcoseg.unet import UNetConfig


def small_config(out_dir, count=20, k=5, seed=0):
    return RunConfig(
        out_dir=Path(out_dir),
        synth=SynthDatasetSpec(count=count, radius=32),
        k=k,
        seed=seed,
        unet=UNetConfig(depth=2, base_channels=8, input_size=64),
        train=TrainConfig(epochs=3, steps_per_epoch=6, batch_size=2, early_stop_patience=None),
        threads=1,
    )


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = small_config(out)
    report = run_pipeline(cfg)
    return cfg, report


class TestRunPipeline:
    def test_ten_checkpoints(self, completed_run):
        cfg, report = completed_run
        on_disk = sorted(cfg.out_dir.glob("gt*/fold*/checkpoint.npz"))
        assert len(on_disk) == 10
        assert len(report.checkpoints) == 10

    def test_fold_test_sizes(self, completed_run):
        _, report = completed_run
        assert len(report.fold_rows) == 10
        assert all(row["n_test"] == 4 for row in report.fold_rows)

    def test_artifact_layout(self, completed_run):
        cfg, _ = completed_run
        for gt in ("gt1", "gt2"):
            for fold in range(cfg.k):
                fold_dir = cfg.out_dir / gt / f"fold{fold}"
                assert (fold_dir / "checkpoint.npz").exists()
                assert (fold_dir / "history.csv").exists()
                assert list((fold_dir / "preds").glob("*.png"))
        report_dir = cfg.out_dir / "report"
        for rel in (
            "tables/segmentation_validation.csv",
            "tables/test_vs_gold.csv",
            "tables/areas.csv",
            "tables/classification_metrics.csv",
            "tables/classifications_model1.csv",
            "tables/classifications_model2.csv",
            "curves/cutoff_curve_model1.csv",
            "curves/cutoff_curve_model2.csv",
            "curves/selected_cutoffs.json",
            "curves/pr_curve.svg",
            "curves/roc_curve.svg",
            "scatter/area_scatter.csv",
            "scatter/area_scatter.svg",
            "report.json",
        ):
            assert (report_dir / rel).exists(), rel
        assert (cfg.out_dir / "folds.json").exists()

    def test_aggregates_recomputable_from_fold_csv(self, completed_run):
        cfg, report = completed_run
        rows = []
        with open(cfg.out_dir / "report" / "tables" / "segmentation_validation.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        for model in ("model1", "model2"):
            dices = [float(r["valid_dice"]) for r in rows if r["model"] == model]
            assert len(dices) == 5
            assert report.validation_means[model]["dice"] == pytest.approx(float(np.mean(dices)), abs=1e-9)

    def test_confusion_totals_match_case_count(self, completed_run):
        _, report = completed_run
        for model in ("model1", "model2"):
            c = report.confusions[model]
            assert c["tp"] + c["fp"] + c["fn"] + c["tn"] == 20

    def test_every_case_classified_once(self, completed_run):
        cfg, _ = completed_run
        for model in ("model1", "model2"):
            with open(cfg.out_dir / "report" / "tables" / f"classifications_{model}.csv", newline="") as fh:
                ids = [row["id"] for row in csv.DictReader(fh)]
            assert len(ids) == 20
            assert len(set(ids)) == 20

    def test_curve_csv_reloads(self, completed_run):
        cfg, report = completed_run
        for model in ("model1", "model2"):
            curve, selected = read_curve_csv(cfg.out_dir / "report" / "curves" / f"cutoff_curve_{model}.csv")
            cutoffs = [p.cutoff for p in curve.points]
            assert cutoffs == sorted(set(cutoffs))
            assert selected is not None
            assert selected.cutoff == pytest.approx(report.selected_cutoffs[model], abs=1e-6)

    def test_report_json_parses(self, completed_run):
        cfg, report = completed_run
        doc = json.loads((cfg.out_dir / "report" / "report.json").read_text())
        assert doc["selected_cutoffs"] == report.selected_cutoffs
        assert doc["config_echo"]["k"] == cfg.k

    def test_external_manifest_source(self, tmp_path):
        from pcoseg.dataset import SynthDatasetSpec as Spec
        from pcoseg.dataset import synthesize_dataset

        synthesize_dataset(Spec(count=15, radius=32), seed=5, out_dir=tmp_path / "ext")
        cfg = RunConfig(
            out_dir=tmp_path / "run",
            manifest=tmp_path / "ext" / "manifest.json",
            k=3,
            seed=1,
            unet=UNetConfig(depth=2, base_channels=8, input_size=64),
            train=TrainConfig(epochs=2, steps_per_epoch=4, batch_size=2, early_stop_patience=None),
            threads=1,
        )
        report = run_pipeline(cfg)
        assert len(report.checkpoints) == 6
        assert sum(row["n_test"] for row in report.fold_rows) == 2 * 15
        # the imported manifest references the external files, untouched
        assert len(list((tmp_path / "ext" / "images").glob("*.png"))) == 15
        assert not (cfg.out_dir / "data" / "images").exists()
        assert len(list((cfg.out_dir / "data" / "gt2").glob("*.png"))) == 15

    def test_evaluate_without_training_fails_with_stage(self, tmp_path):
        cfg = small_config(tmp_path / "fresh", count=15, k=3)
        stage_synth(cfg)
        stage_gt2(cfg)
        with pytest.raises(PipelineError) as err:
            stage_evaluate(cfg)
        assert err.value.stage == "evaluate"
        assert err.value.fold == 0


def ten_point_curve(offset=0.0):
    points = []
    n_cases = 20
    for j in range(10):
        tp = 10 - j
        fn = j
        fp = max(0, 8 - j)
        tn = n_cases - tp - fn - fp
        counts = ConfusionCounts(tp, fp, fn, tn)
        precision = tp / (tp + fp) if tp + fp else None
        points.append(
            CutoffPoint(offset + j * 1.5, counts, precision, tp / 10, fp / (fp + tn))
        )
    return CutoffCurve(points)


class TestEmitCurves:
    def test_two_curves_files_and_rows(self, tmp_path):
        files = emit_curves(ten_point_curve(), ten_point_curve(0.3), tmp_path)
        svgs = [f for f in files if f.suffix == ".svg"]
        csvs = [f for f in files if f.suffix == ".csv"]
        assert len(svgs) == 2 and len(csvs) == 2
        for path in csvs:
            with open(path, newline="") as fh:
                assert len(list(csv.DictReader(fh))) == 10

    def test_single_point_curve(self, tmp_path):
        point = CutoffPoint(4.0, ConfusionCounts(5, 1, 0, 2), 5 / 6, 1.0, 1 / 3)
        files = emit_curves(CutoffCurve([point]), None, tmp_path)
        assert any(f.name == "pr_curve.svg" for f in files)

    def test_round_trip_geometry(self, tmp_path):
        curve = ten_point_curve()
        emit_curves(curve, None, tmp_path, selected_m1=curve.points[2])
        reloaded, selected = read_curve_csv(tmp_path / "cutoff_curve_model1.csv")
        assert selected.cutoff == pytest.approx(curve.points[2].cutoff, abs=1e-6)
        for orig, back in zip(curve.points, reloaded.points):
            assert back.cutoff == float(f"{orig.cutoff:.6f}")
            assert back.counts == orig.counts
            assert back.recall == pytest.approx(orig.recall, abs=1e-6)

    def test_unwritable_target(self, tmp_path):
        blocker = tmp_path / "file.txt"
        blocker.write_text("x")
        with pytest.raises(ValueError):
            emit_curves(ten_point_curve(), None, blocker / "sub")


class TestEmitScatter:
    def records(self, areas, model):
        return [AreaRecord(f"i{j}", a, model) for j, a in enumerate(areas)]

    def test_counts_and_diagonal(self, tmp_path):
        areas = [1.0, 5.0, 20.0, 40.0]
        labels = {f"i{j}": ("positive" if a > 4 else "negative") for j, a in enumerate(areas)}
        csv_path, svg_path = emit_scatter(
            self.records(areas, "model1"), self.records(areas, "model2"), labels, tmp_path
        )
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        for row in rows:
            assert row["area_model1"] == row["area_model2"]
        assert svg_path.exists()

    def test_disagreement_flagged(self, tmp_path):
        m1 = [AreaRecord("a", 10.0, "model1"), AreaRecord("b", 2.0, "model1")]
        m2 = [AreaRecord("a", 3.0, "model2"), AreaRecord("b", 2.0, "model2")]
        labels = {"a": "positive", "b": "negative"}
        csv_path, _ = emit_scatter(m1, m2, labels, tmp_path, cutoff_m1=4.0, cutoff_m2=4.0)
        with open(csv_path, newline="") as fh:
            rows = {row["id"]: row for row in csv.DictReader(fh)}
        assert rows["a"]["disagreement"] == "1"
        assert rows["a"]["misclassified_model2"] == "1"
        assert rows["b"]["disagreement"] == "0"

    def test_id_mismatch_named(self, tmp_path):
        m1 = [AreaRecord("a", 1.0, "model1")]
        m2 = [AreaRecord("b", 1.0, "model2")]
        with pytest.raises(ValueError, match="'a', 'b'"):
            emit_scatter(m1, m2, {"a": "negative", "b": "negative"}, tmp_path)


class TestCli:
    def test_synth_command(self, tmp_path, capsys):
        rc = cli_main(["synth", "--count", "6", "--seed", "3", "--out", str(tmp_path / "d")])
        assert rc == 0
        assert (tmp_path / "d" / "manifest.json").exists()
        assert "wrote 6 samples" in capsys.readouterr().out

    def test_folds_command(self, tmp_path, capsys):
        cli_main(["synth", "--count", "10", "--seed", "1", "--out", str(tmp_path / "d")])
        capsys.readouterr()
        rc = cli_main(["folds", "--manifest", str(tmp_path / "d" / "manifest.json"), "--k", "5", "--seed", "2"])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["k"] == 5
        assert len(doc["assignments"]) == 10

    def test_staged_flow_matches_run_all(self, tmp_path, capsys):
        staged_out = tmp_path / "staged"
        config = {
            "out": str(staged_out),
            "seed": 4,
            "k": 3,
            "data": {"synth": {"count": 15, "radius": 32}},
            "unet": {"depth": 2, "base_channels": 8, "input_size": 64},
            "train": {
                "epochs": 2,
                "steps_per_epoch": 4,
                "batch_size": 2,
                "early_stop_patience": None,
            },
            "threads": 1,
        }
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))

        assert cli_main(["gt2", "--config", str(cfg_path)]) == 0
        for gt in ("1", "2"):
            for fold in range(3):
                assert cli_main(["train", "--config", str(cfg_path), "--gt", gt, "--fold", str(fold)]) == 0
        assert cli_main(["evaluate", "--config", str(cfg_path)]) == 0
        assert cli_main(["select-cutoff", "--config", str(cfg_path)]) == 0
        assert cli_main(["classify", "--config", str(cfg_path)]) == 0
        assert cli_main(["report", "--config", str(cfg_path)]) == 0
        capsys.readouterr()

        runall_out = tmp_path / "runall"
        assert cli_main(["run-all", "--config", str(cfg_path), "--out", str(runall_out)]) == 0
        capsys.readouterr()

        staged_report = (staged_out / "report" / "report.json").read_text()
        runall_report = (runall_out / "report" / "report.json").read_text()
        assert json.loads(staged_report)["selected_cutoffs"] == json.loads(runall_report)["selected_cutoffs"]
        assert (
            json.loads(staged_report)["validation_means"]
            == json.loads(runall_report)["validation_means"]
        )

    def test_gt2_manifest_mode(self, tmp_path, capsys):
        cli_main(["synth", "--count", "5", "--seed", "2", "--out", str(tmp_path / "d")])
        capsys.readouterr()
        manifest_path = tmp_path / "d" / "manifest.json"
        rc = cli_main(["gt2", "--manifest", str(manifest_path), "--seed", "1", "--clusters", "3"])
        assert rc == 0
        assert len(list((tmp_path / "d" / "gt2").glob("*.png"))) == 5
        doc = json.loads(manifest_path.read_text())
        assert all(item["gt2"] for item in doc["items"])

    def test_bad_config_exits_nonzero(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"out": str(tmp_path / "x"), "data": {}}))
        assert cli_main(["run-all", "--config", str(cfg_path)]) != 0
        assert "error" in capsys.readouterr().err
