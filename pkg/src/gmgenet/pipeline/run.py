"""Two-stage protocol: extractor training, heat-guided VOI extraction,
cross-validated classifiers on VOIs and on full volumes, evaluation.

Each stage reads and writes plain files under a run directory so the CLI can
run stages one at a time; ``two_stage_run`` chains them in memory.

Run directory layout::

    config.txt            resolved configuration
    run.log               progress log; the only file with timestamps
    split.csv             partition of patient ids
    preprocessed/         <id>.gmgv volumes, <id>_mask.gmgv truth masks
    checkpoints/          extractor.gmgm, voi_fold<k>.gmgm, full_fold<k>.gmgm
    extractor_trace.csv   epoch, loss, val_accuracy
    voi/                  <id>.gmgv cropped VOIs
    voi_boxes.csv         per-patient box, status and heatmap peak
    heatmaps/             <id>.gmgv refined heatmaps and <id>/ PGM slices
    predictions.csv       test-set probabilities per model and fold
    report.txt            metrics table, fold rows, t-test, extraction and localization
    roc.csv               threshold, fpr, tpr of the fold-averaged VOI classifier
"""
from __future__ import annotations

import csv
import logging
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..ctprep import preprocess, transform_mask
from ..dataio import export_heatmap_slices, load_manifest, load_sample_volume, read_volume, write_array
from ..densenet3d import build_model, load_checkpoint, model_from_bytes, checkpoint_bytes, save_checkpoint
from ..gradcam import Heatmap, NoBodyError, NoSignalError, VOIBox, extract_voi, gradcam, refine_mask
from .metrics import DegenerateTestError, confusion, paired_t_test, roc_auc
from .split import SplitPlan, holdout_split, make_split
from .train import accuracy, predict, train

log = logging.getLogger(__name__)

ARMS = (("full", "DenseNet (full volume)"), ("voi", "GMGENet (VOI)"))


class RunError(RuntimeError):
    """A stage is missing an artifact from an earlier stage."""


# ---------------------------------------------------------------- data holders

@dataclass
class PreparedSet:
    ids: list[str]
    labels: dict[str, int]
    volumes: dict[str, np.ndarray]  # (D, H, W) float32 in [0, 1]
    masks: dict[str, np.ndarray | None]

    def stack(self, ids) -> tuple[np.ndarray, np.ndarray]:
        return np.stack([self.volumes[i] for i in ids]), np.array([self.labels[i] for i in ids])


@dataclass
class Extraction:
    boxes: dict[str, VOIBox]
    crops: dict[str, np.ndarray]
    heatmaps: dict[str, Heatmap]
    failures: dict[str, str]  # id -> reason
    peaks: dict[str, tuple[int, int, int]] = field(default_factory=dict)


@dataclass
class FoldMetrics:
    fold: int
    accuracy: float
    auc: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass
class MetricsReport:
    """Per-fold test metrics of one model family with mean and sample sd."""

    name: str
    folds: list[FoldMetrics]
    roc_points: list[tuple[float, float, float]] = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(f, metric) for f in self.folds], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(self.values(metric).mean())

    def sd(self, metric: str) -> float:
        v = self.values(metric)
        return float(v.std(ddof=1)) if len(v) > 1 else 0.0

    def counts(self) -> tuple[int, int, int, int]:
        return tuple(int(sum(getattr(f, c) for f in self.folds)) for c in ("tp", "fp", "tn", "fn"))


@dataclass
class LocalizationResult:
    hit_rate: float
    mean_iou: float
    evaluated: int
    skipped: int


@dataclass
class RunReport:
    arms: dict[str, MetricsReport]
    ttest: object  # TTestResult or None when degenerate
    ttest_note: str
    extraction_total: int
    failures: dict[str, str]
    localization: LocalizationResult | None
    extractor_val: list[float]


# ---------------------------------------------------------------- helpers

def _ensure(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise RunError(f"{path} is missing; run the {stage} stage first")
    return path


def _bbox(mask: np.ndarray) -> VOIBox:
    idx = np.nonzero(mask)
    lo = [int(i.min()) for i in idx]
    hi = [int(i.max()) + 1 for i in idx]
    return VOIBox(lo[0], hi[0], lo[1], hi[1], lo[2], hi[2], (hi[2] - lo[2], hi[1] - lo[1], hi[0] - lo[0]))


def box_mask_iou(box: VOIBox, mask: np.ndarray) -> float:
    """IoU between a VOI box and the bounding box of a truth mask."""
    return box.iou(_bbox(mask))


def localization_eval(heatmaps, voi_boxes, truth_masks) -> LocalizationResult:
    """Peak hit-rate over samples with a non-empty mask, and mean box IoU over those with a box.

    ``voi_boxes`` entries may be None for failed extractions; those still count
    toward the hit-rate. Empty masks are skipped and counted.
    """
    hits, ious, evaluated, skipped = 0, [], 0, 0
    for hm, box, mask in zip(heatmaps, voi_boxes, truth_masks):
        mask = None if mask is None else np.asarray(mask, dtype=bool)
        if mask is None or not mask.any():
            skipped += 1
            continue
        values = hm.values if hasattr(hm, "values") else np.asarray(hm)
        if values.shape != mask.shape:
            raise ValueError(f"heatmap {values.shape} and mask {mask.shape} are not aligned")
        evaluated += 1
        peak = np.unravel_index(np.argmax(values), values.shape)
        hits += bool(mask[peak])
        if box is not None:
            ious.append(box_mask_iou(box, mask))
    if skipped:
        log.warning("localization: skipped %d samples with empty truth masks", skipped)
    return LocalizationResult(
        hit_rate=hits / evaluated if evaluated else float("nan"),
        mean_iou=float(np.mean(ious)) if ious else float("nan"),
        evaluated=evaluated,
        skipped=skipped,
    )


# ---------------------------------------------------------------- stage 0: preprocessing

def stage_preprocess(cfg, run_dir: Path) -> PreparedSet:
    if not cfg.manifest:
        raise RunError("no manifest configured")
    samples = load_manifest(cfg.manifest)
    prep = cfg.prep_config()
    out = _ensure(run_dir / "preprocessed")
    ids, labels, volumes, masks = [], {}, {}, {}
    rows = []
    for s in samples:
        raw = load_sample_volume(s)
        vol = preprocess(raw, prep)
        mask = None
        if s.mask_path is not None:
            m = read_volume(s.mask_path).voxels
            if m.shape != raw.voxels.shape:
                raise RunError(f"{s.patient_id}: mask {m.shape} does not match volume {raw.voxels.shape}")
            mask = transform_mask(m >= 0.5, raw, prep)
            write_array(mask.astype(np.float32), out / f"{s.patient_id}_mask.gmgv", vol.spacing)
        write_array(vol.voxels, out / f"{s.patient_id}.gmgv", vol.spacing)
        ids.append(s.patient_id)
        labels[s.patient_id] = s.label
        volumes[s.patient_id] = vol.voxels
        masks[s.patient_id] = mask
        rows.append((s.patient_id, s.label, int(mask is not None)))
    with (out / "index.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "label", "has_mask"])
        w.writerows(rows)
    log.info("stage=preprocess samples=%d grid=%s", len(ids), cfg.grid)
    return PreparedSet(ids, labels, volumes, masks)


def load_prepared(run_dir: Path) -> PreparedSet:
    base = run_dir / "preprocessed"
    index = _require(base / "index.csv", "preprocess")
    ids, labels, volumes, masks = [], {}, {}, {}
    with index.open(newline="") as fh:
        for row in csv.DictReader(fh):
            pid = row["patient_id"]
            ids.append(pid)
            labels[pid] = int(row["label"])
            volumes[pid] = read_volume(base / f"{pid}.gmgv").voxels
            masks[pid] = read_volume(base / f"{pid}_mask.gmgv").voxels >= 0.5 if row["has_mask"] == "1" else None
    return PreparedSet(ids, labels, volumes, masks)


# ---------------------------------------------------------------- stage 1: extractor

def plan_split(cfg, data: PreparedSet) -> SplitPlan:
    return make_split(
        data.ids, [data.labels[i] for i in data.ids], seed=cfg.seed,
        extractor_n=cfg.extractor_n, test_frac=cfg.test_frac, folds=cfg.folds,
    )


def stage_train_extractor(cfg, run_dir: Path, data: PreparedSet | None = None):
    data = data or load_prepared(run_dir)
    plan = plan_split(cfg, data)
    plan.write_csv(run_dir / "split.csv")
    fit_ids, val_ids = holdout_split(
        plan.extractor_ids, [data.labels[i] for i in plan.extractor_ids], cfg.extractor_val_frac, seed=cfg.seed
    )
    x, y = data.stack(fit_ids)
    vx, vy = data.stack(val_ids)
    model = build_model(cfg.model_config("extractor", cfg.grid_whd, seed=cfg.seed))
    result = train(model, x, y, cfg.train_config("extractor", seed=cfg.seed), val=(vx, vy), tag="extractor")
    save_checkpoint(model, _ensure(run_dir / "checkpoints") / "extractor.gmgm")
    with (run_dir / "extractor_trace.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_accuracy"])
        for e, (loss, acc) in enumerate(zip(result.loss_trace, result.val_accuracy), start=1):
            w.writerow([e, f"{loss:.8f}", f"{acc:.6f}"])
    log.info(
        "stage=extractor fit=%d val=%d final_val_acc=%.4f best_val_acc=%.4f",
        len(fit_ids), len(val_ids), result.val_accuracy[-1] if result.val_accuracy else float("nan"),
        max(result.val_accuracy) if result.val_accuracy else float("nan"),
    )
    return model, plan, result


def read_extractor_val(run_dir: Path) -> list[float]:
    path = run_dir / "extractor_trace.csv"
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        return [float(r["val_accuracy"]) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------- stage 2: VOI extraction

def heatmap_for(model, volume: np.ndarray, cfg) -> Heatmap:
    cam = gradcam(model, volume)
    return refine_mask(cam.heatmap, volume, cfg.intensity_floor)


def stage_extract_voi(cfg, run_dir: Path, data: PreparedSet | None = None, plan: SplitPlan | None = None, model=None) -> Extraction:
    data = data or load_prepared(run_dir)
    plan = plan or SplitPlan.read_csv(_require(run_dir / "split.csv", "train-extractor"))
    model = model or load_checkpoint(_require(run_dir / "checkpoints" / "extractor.gmgm", "train-extractor"))
    voi_dir = _ensure(run_dir / "voi")
    hm_dir = _ensure(run_dir / "heatmaps")
    ext = Extraction({}, {}, {}, {})
    rows = []
    for pid in plan.train_ids + plan.test_ids:
        vol = data.volumes[pid]
        box = None
        try:
            hm = heatmap_for(model, vol, cfg)
        except NoBodyError as exc:
            ext.failures[pid] = "no_body"
            log.warning("stage=extract id=%s status=no_body reason=%s", pid, exc)
            rows.append([pid, data.labels[pid], "no_body"] + [""] * 9)
            continue
        ext.heatmaps[pid] = hm
        peak = hm.peak()
        ext.peaks[pid] = peak
        try:
            box, crop = extract_voi(hm, vol, cfg.voi_whd, cfg.cam_threshold, cfg.signal_floor)
        except NoSignalError as exc:
            ext.failures[pid] = "no_signal"
            log.warning("stage=extract id=%s status=no_signal reason=%s", pid, exc)
        else:
            ext.boxes[pid] = box
            ext.crops[pid] = crop
            write_array(crop, voi_dir / f"{pid}.gmgv")
        write_array(hm.values.astype(np.float32), hm_dir / f"{pid}.gmgv")
        export_heatmap_slices(hm, vol, hm_dir / pid, stride=cfg.heatmap_stride)
        status = "ok" if box is not None else ext.failures[pid]
        coords = list(box.as_tuple()) if box is not None else [""] * 6
        rows.append([pid, data.labels[pid], status, *coords, *peak])
    with (run_dir / "voi_boxes.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "label", "status", "z0", "z1", "y0", "y1", "x0", "x1", "peak_z", "peak_y", "peak_x"])
        w.writerows(rows)
    log.info("stage=extract attempted=%d failed=%d", len(rows), len(ext.failures))
    return ext


def load_extraction(cfg, run_dir: Path) -> Extraction:
    ext = Extraction({}, {}, {}, {})
    with _require(run_dir / "voi_boxes.csv", "extract-voi").open(newline="") as fh:
        for row in csv.DictReader(fh):
            pid = row["patient_id"]
            if row["status"] != "ok":
                ext.failures[pid] = row["status"]
            else:
                coords = [int(row[k]) for k in ("z0", "z1", "y0", "y1", "x0", "x1")]
                ext.boxes[pid] = VOIBox(*coords, cfg.voi_whd)
                ext.crops[pid] = read_volume(run_dir / "voi" / f"{pid}.gmgv").voxels
            hm_path = run_dir / "heatmaps" / f"{pid}.gmgv"
            if hm_path.exists():
                values = read_volume(hm_path).voxels.astype(np.float64)
                ext.heatmaps[pid] = Heatmap(values, values.shape)
                ext.peaks[pid] = tuple(int(row[k]) for k in ("peak_z", "peak_y", "peak_x"))
    return ext


# ---------------------------------------------------------------- stage 3: classifiers

def _fold_job(job):
    """Train one (arm, fold) classifier; returns checkpoint bytes. Runs in workers."""
    cfg, arm, k, x, y, extent = job
    model = build_model(cfg.model_config("classifier", extent, seed=cfg.seed + 101 + k))
    result = train(model, x, y, cfg.train_config("classifier", seed=cfg.seed + 1009 + k), tag=f"{arm}_fold{k}")
    return arm, k, checkpoint_bytes(model), result.loss_trace


def _arm_inputs(arm: str, data: PreparedSet, ext: Extraction):
    return ext.crops if arm == "voi" else data.volumes


def usable(ids, ext: Extraction) -> list[str]:
    """Ids whose VOI extraction succeeded; both arms train and test on these."""
    return [i for i in ids if i not in ext.failures]


def stage_train_classifier(cfg, run_dir: Path, data: PreparedSet | None = None, plan: SplitPlan | None = None, ext: Extraction | None = None):
    data = data or load_prepared(run_dir)
    plan = plan or SplitPlan.read_csv(_require(run_dir / "split.csv", "train-extractor"))
    ext = ext or load_extraction(cfg, run_dir)
    ck = _ensure(run_dir / "checkpoints")
    jobs = []
    for arm, _ in ARMS:
        source = _arm_inputs(arm, data, ext)
        extent = cfg.voi_whd if arm == "voi" else cfg.grid_whd
        for k in range(len(plan.folds)):
            ids = usable(plan.fold_train(k), ext)
            x = np.stack([source[i] for i in ids])
            y = np.array([data.labels[i] for i in ids])
            jobs.append((cfg, arm, k, x, y, extent))
    if cfg.workers > 1:
        with multiprocessing.get_context("fork").Pool(cfg.workers) as pool:
            results = pool.map(_fold_job, jobs)
    else:
        results = [_fold_job(j) for j in jobs]
    models = {}
    for arm, k, blob, trace in results:
        (ck / f"{arm}_fold{k}.gmgm").write_bytes(blob)
        models[(arm, k)] = model_from_bytes(blob)
        log.info("stage=classifier arm=%s fold=%d final_loss=%.6f", arm, k, trace[-1] if trace else float("nan"))
    return models


# ---------------------------------------------------------------- stage 4: evaluation

def _fold_metrics(k: int, probs: np.ndarray, labels: np.ndarray, threshold: float) -> FoldMetrics:
    preds = (probs >= threshold).astype(int)
    c = confusion(preds, labels)
    auc, _ = roc_auc(probs, labels)
    return FoldMetrics(k, c.accuracy, auc, c.sensitivity, c.specificity, c.tp, c.fp, c.tn, c.fn)


def evaluate_arms(cfg, data: PreparedSet, plan: SplitPlan, ext: Extraction, models: dict) -> tuple[dict[str, MetricsReport], dict]:
    test_ids = usable(plan.test_ids, ext)
    labels = np.array([data.labels[i] for i in test_ids])
    arms, probs_by = {}, {}
    for arm, title in ARMS:
        source = _arm_inputs(arm, data, ext)
        x = np.stack([source[i] for i in test_ids])
        folds, fold_probs = [], []
        for k in range(len(plan.folds)):
            p = predict(models[(arm, k)], x)
            probs_by[(arm, k)] = p
            fold_probs.append(p)
            folds.append(_fold_metrics(k, p, labels, cfg.decision_threshold))
        _, points = roc_auc(np.mean(fold_probs, axis=0), labels)
        arms[arm] = MetricsReport(title, folds, points)
    return arms, {"ids": test_ids, "labels": labels, "probs": probs_by}


def localization_for(plan: SplitPlan, data: PreparedSet, ext: Extraction) -> LocalizationResult | None:
    ids = [i for i in plan.train_ids + plan.test_ids if data.labels[i] == 1 and i in ext.heatmaps]
    if not ids or all(data.masks[i] is None for i in ids):
        return None
    return localization_eval([ext.heatmaps[i] for i in ids], [ext.boxes.get(i) for i in ids], [data.masks[i] for i in ids])


def stage_evaluate(cfg, run_dir: Path, data=None, plan=None, ext=None, models=None, extractor_val=None) -> RunReport:
    data = data or load_prepared(run_dir)
    plan = plan or SplitPlan.read_csv(_require(run_dir / "split.csv", "train-extractor"))
    ext = ext or load_extraction(cfg, run_dir)
    if models is None:
        models = {}
        for arm, _ in ARMS:
            for k in range(len(plan.folds)):
                models[(arm, k)] = load_checkpoint(_require(run_dir / "checkpoints" / f"{arm}_fold{k}.gmgm", "train-classifier"))
    arms, preds = evaluate_arms(cfg, data, plan, ext, models)
    try:
        tt = paired_t_test(arms["voi"].values("accuracy"), arms["full"].values("accuracy"), cfg.alpha)
        note = ""
    except DegenerateTestError as exc:
        tt, note = None, str(exc)
    report = RunReport(
        arms=arms,
        ttest=tt,
        ttest_note=note,
        extraction_total=len(plan.train_ids) + len(plan.test_ids),
        failures=dict(ext.failures),
        localization=localization_for(plan, data, ext),
        extractor_val=read_extractor_val(run_dir) if extractor_val is None else list(extractor_val),
    )
    write_report(run_dir / "report.txt", report, cfg)
    write_roc(run_dir / "roc.csv", arms["voi"].roc_points)
    with (run_dir / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "label", "model", "fold", "probability"])
        for arm, _ in ARMS:
            for k in range(len(plan.folds)):
                for pid, lab, p in zip(preds["ids"], preds["labels"], preds["probs"][(arm, k)]):
                    w.writerow([pid, int(lab), arm, k, f"{p:.8f}"])
    log.info(
        "stage=evaluate voi_acc=%.4f full_acc=%.4f reject=%s",
        arms["voi"].mean("accuracy"), arms["full"].mean("accuracy"), "n/a" if tt is None else tt.reject,
    )
    return report


# ---------------------------------------------------------------- report files

METRICS = ("accuracy", "auc", "sensitivity", "specificity")


def format_report(report: RunReport, cfg) -> str:
    lines = ["Model                      Accuracy          AUC               Sensitivity       Specificity"]
    for arm, _ in ARMS:
        r = report.arms[arm]
        cells = "".join(f"{r.mean(m):.4f} ({r.sd(m):.4f})".ljust(18) for m in METRICS)
        lines.append(f"{r.name:<27}{cells}".rstrip())
    lines += ["", "Fold results on the test set", "model  fold  accuracy  auc       sensitivity  specificity  TP  FP  TN  FN"]
    for arm, _ in ARMS:
        for f in report.arms[arm].folds:
            lines.append(
                f"{arm:<6} {f.fold:<5} {f.accuracy:<9.4f} {f.auc:<9.4f} {f.sensitivity:<12.4f} {f.specificity:<12.4f} "
                f"{f.tp:<3} {f.fp:<3} {f.tn:<3} {f.fn}"
            )
    lines.append("")
    tt = report.ttest
    if tt is None:
        lines.append(f"paired t-test (accuracy, voi vs full): degenerate ({report.ttest_note})")
    else:
        lines.append(
            f"paired t-test (accuracy, voi vs full): t={tt.t:.4f} df={tt.df} critical={tt.critical:.4f} "
            f"alpha={cfg.alpha} reject={'yes' if tt.reject else 'no'}"
        )
    fails = report.failures
    lines.append(f"extraction: attempted={report.extraction_total} failed={len(fails)}")
    for pid in sorted(fails):
        lines.append(f"  failed {pid}: {fails[pid]}")
    loc = report.localization
    if loc is None:
        lines.append("localization: no truth masks")
    else:
        lines.append(
            f"localization: positives={loc.evaluated} hit_rate={loc.hit_rate:.4f} mean_iou={loc.mean_iou:.4f} "
            f"skipped_empty={loc.skipped}"
        )
    if report.extractor_val:
        lines.append(
            f"extractor: epochs={len(report.extractor_val)} final_val_acc={report.extractor_val[-1]:.4f} "
            f"best_val_acc={max(report.extractor_val):.4f}"
        )
    return "\n".join(lines) + "\n"


def write_report(path: Path, report: RunReport, cfg) -> None:
    Path(path).write_text(format_report(report, cfg))


def write_roc(path: Path, points) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in points:
            w.writerow([f"{thr:.8f}" if np.isfinite(thr) else "inf", f"{fpr:.8f}", f"{tpr:.8f}"])


# ---------------------------------------------------------------- end to end

def two_stage_run(cfg, run_dir=None) -> RunReport:
    """Preprocess, train the extractor, extract VOIs, cross-validate both classifiers, evaluate."""
    run_dir = _ensure(Path(run_dir or cfg.run_dir))
    (run_dir / "config.txt").write_text(cfg.to_text())
    data = stage_preprocess(cfg, run_dir)
    extractor, plan, result = stage_train_extractor(cfg, run_dir, data)
    ext = stage_extract_voi(cfg, run_dir, data, plan, extractor)
    models = stage_train_classifier(cfg, run_dir, data, plan, ext)
    return stage_evaluate(cfg, run_dir, data, plan, ext, models, result.val_accuracy)
