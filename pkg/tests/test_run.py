import csv

import numpy as np
import pytest

from conftest import tiny_config
from gmgenet.gradcam import Heatmap, VOIBox
from gmgenet.pipeline import run as pipeline
from gmgenet.pipeline.split import SplitPlan


def hot_at(shape, point):
    v = np.zeros(shape)
    v[point] = 1.0
    return Heatmap(v, (1, 1, 1))


class TestLocalization:
    def test_three_sample_fixture(self):
        shape = (6, 6, 6)
        mask = np.zeros(shape, dtype=bool)
        mask[1:3, 1:3, 1:3] = True
        heatmaps = [hot_at(shape, (1, 1, 1)), hot_at(shape, (2, 2, 2)), hot_at(shape, (5, 5, 5))]
        box = VOIBox(1, 3, 1, 3, 1, 3, (2, 2, 2))
        res = pipeline.localization_eval(heatmaps, [box, None, box], [mask, mask, mask])
        assert res.hit_rate == pytest.approx(2 / 3)
        assert res.mean_iou == pytest.approx(1.0)
        assert (res.evaluated, res.skipped) == (3, 0)

    def test_empty_masks_skipped(self, caplog):
        shape = (4, 4, 4)
        mask = np.zeros(shape, dtype=bool)
        mask[0, 0, 0] = True
        res = pipeline.localization_eval(
            [hot_at(shape, (0, 0, 0))] * 3, [None] * 3, [mask, np.zeros(shape, dtype=bool), None]
        )
        assert (res.hit_rate, res.evaluated, res.skipped) == (1.0, 1, 2)
        assert np.isnan(res.mean_iou)
        assert "skipped 2" in caplog.text

    def test_iou_against_mask_bbox(self):
        mask = np.zeros((8, 8, 8), dtype=bool)
        mask[0:4, 0:2, 0:2] = True
        box = VOIBox(2, 6, 0, 2, 0, 2, (2, 2, 4))
        assert pipeline.box_mask_iou(box, mask) == pytest.approx(2 / 6)

    def test_misaligned(self):
        with pytest.raises(ValueError):
            pipeline.localization_eval([hot_at((2, 2, 2), (0, 0, 0))], [None], [np.ones((3, 3, 3), dtype=bool)])


@pytest.fixture(scope="module")
def tiny_run(tiny_dataset, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run")
    cfg = tiny_config(tiny_dataset, run_dir)
    report = pipeline.two_stage_run(cfg, run_dir)
    return cfg, run_dir, report


class TestTinyRun:
    def test_artifacts(self, tiny_run):
        _, run_dir, _ = tiny_run
        for name in ("config.txt", "split.csv", "voi_boxes.csv", "report.txt", "roc.csv", "predictions.csv",
                     "extractor_trace.csv", "checkpoints/extractor.gmgm", "preprocessed/index.csv"):
            assert (run_dir / name).is_file(), name
        for arm in ("full", "voi"):
            for k in range(5):
                assert (run_dir / "checkpoints" / f"{arm}_fold{k}.gmgm").is_file()

    def test_partitions_disjoint(self, tiny_run, tiny_dataset):
        _, run_dir, _ = tiny_run
        plan = SplitPlan.read_csv(run_dir / "split.csv")
        plan.validate()
        assert (len(plan.extractor_ids), len(plan.train_ids), len(plan.test_ids)) == (10, 16, 4)
        assert len(set(plan.all_ids)) == 30

    def test_report_layout(self, tiny_run):
        _, run_dir, report = tiny_run
        text = (run_dir / "report.txt").read_text()
        lines = text.splitlines()
        assert lines[1].startswith("DenseNet (full volume)") and lines[2].startswith("GMGENet (VOI)")
        fold_rows = [l for l in lines if l.startswith(("full ", "voi "))]
        assert len(fold_rows) == 10
        assert "paired t-test" in text and "extraction: attempted=20" in text
        assert all(len(r.folds) == 5 for r in report.arms.values())

    def test_report_numbers_consistent(self, tiny_run):
        _, run_dir, report = tiny_run
        plan = SplitPlan.read_csv(run_dir / "split.csv")
        n_test = len([i for i in plan.test_ids if i not in report.failures])
        for r in report.arms.values():
            for f in r.folds:
                assert f.tp + f.fp + f.tn + f.fn == n_test
                assert f.accuracy == pytest.approx((f.tp + f.tn) / (f.tp + f.fp + f.tn + f.fn))
            assert r.sd("accuracy") == pytest.approx(np.std(r.values("accuracy"), ddof=1))

    def test_roc_file(self, tiny_run):
        _, run_dir, _ = tiny_run
        rows = list(csv.reader((run_dir / "roc.csv").open()))
        assert rows[0] == ["threshold", "fpr", "tpr"]
        assert rows[1][0] == "inf" and rows[-1][1:] == ["1.00000000", "1.00000000"]

    def test_predictions_cover_test_set(self, tiny_run):
        _, run_dir, _ = tiny_run
        plan = SplitPlan.read_csv(run_dir / "split.csv")
        rows = list(csv.DictReader((run_dir / "predictions.csv").open()))
        assert {r["patient_id"] for r in rows} <= set(plan.test_ids)
        assert {(r["model"], r["fold"]) for r in rows} == {(a, str(k)) for a in ("full", "voi") for k in range(5)}

    def test_stages_match_run_all(self, tiny_run, tiny_dataset, tmp_path):
        cfg, run_dir, _ = tiny_run
        staged = tiny_config(tiny_dataset, tmp_path)
        pipeline.stage_preprocess(staged, tmp_path)
        pipeline.stage_train_extractor(staged, tmp_path)
        pipeline.stage_extract_voi(staged, tmp_path)
        pipeline.stage_train_classifier(staged, tmp_path)
        pipeline.stage_evaluate(staged, tmp_path)
        assert (tmp_path / "report.txt").read_text() == (run_dir / "report.txt").read_text()
        for k in range(5):
            name = f"checkpoints/voi_fold{k}.gmgm"
            assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes()

    def test_missing_stage_output(self, tiny_dataset, tmp_path):
        with pytest.raises(pipeline.RunError, match="preprocess"):
            pipeline.stage_train_extractor(tiny_config(tiny_dataset, tmp_path), tmp_path)

    def test_no_manifest(self, tmp_path):
        with pytest.raises(pipeline.RunError):
            pipeline.stage_preprocess(tiny_config(tmp_path, tmp_path).with_values(manifest=""), tmp_path)
