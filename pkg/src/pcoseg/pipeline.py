"""End-to-end experiment: synthesis, ground-truth generation, k-fold training
for both ground-truth sources, cutoff selection, case classification and
report emission.

Every stage persists its artifacts under the run directory:

    out/
      data/                 images, gt1/gt2 masks, manifest.json
      folds.json
      gt1/fold<i>/          checkpoint.npz, history.csv, preds/
      gt2/fold<i>/
      report/
        tables/             segmentation + classification CSVs
        curves/             cutoff curve CSVs, PR/ROC plots, selected_cutoffs.json
        scatter/            per-case area scatter plot + CSV
        report.json
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from . import metrics as seg_metrics
from .augment import AugmentSpec, augment_stream, resize_bilinear, resize_nearest
from .classify import (
    AreaRecord,
    CutoffCurve,
    CutoffPoint,
    area_percent,
    candidate_cutoffs,
    classify_case,
    select_cutoff,
    sweep_cutoffs,
)
from .dataset import (
    NEGATIVE,
    DatasetManifest,
    ManifestError,
    ManifestItem,
    RetroImage,
    Roi,
    SynthDatasetSpec,
    crop_roi,
    load_image_png,
    load_manifest,
    make_folds,
    save_manifest,
    save_mask_png,
    synthesize_dataset,
)
from .groundtruth import generate_gt2, load_manual_mask
from .metrics import ConfusionCounts, classification_metrics, confusion, format_metric
from .training import (
    CheckpointRecord,
    TrainConfig,
    predict,
    train_model,
    write_history_csv,
)
from .unet import UNetConfig, build_unet, read_checkpoint_meta

GT_SOURCES = ("gt1", "gt2")
MODEL_FOR_SOURCE = {"gt1": "model1", "gt2": "model2"}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, fold: int | None = None, cause: Exception | None = None):
        where = f"stage {stage}" + (f", fold {fold}" if fold is not None else "")
        super().__init__(f"pipeline failed at {where}: {cause}")
        self.stage = stage
        self.fold = fold


@dataclass
class RunConfig:
    out_dir: Path
    synth: SynthDatasetSpec | None = None
    manifest: Path | None = None
    k: int = 5
    seed: int = 0
    gt_sources: tuple[str, ...] = ("gt1", "gt2")
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    unet: UNetConfig = field(default_factory=lambda: UNetConfig(base_channels=16))
    train: TrainConfig = field(default_factory=TrainConfig)
    clusters: int = 3
    threads: int | None = None

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.manifest is not None:
            self.manifest = Path(self.manifest)
        if (self.synth is None) == (self.manifest is None):
            raise ValueError("config needs exactly one of a synth spec or a manifest path")
        for src in self.gt_sources:
            if src not in GT_SOURCES:
                raise ValueError(f"unknown gt source {src!r}")

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        data = doc.get("data", {})
        synth = None
        manifest = None
        if "synth" in data:
            synth = SynthDatasetSpec(**data["synth"])
        if "manifest" in data:
            manifest = Path(data["manifest"])
        train_doc = dict(doc.get("train", {}))
        return RunConfig(
            out_dir=Path(doc["out"]),
            synth=synth,
            manifest=manifest,
            k=int(doc.get("k", 5)),
            seed=int(doc.get("seed", 0)),
            gt_sources=tuple(doc.get("gt_sources", ["gt1", "gt2"])),
            augment=AugmentSpec(**doc.get("augment", {})),
            unet=UNetConfig(**doc.get("unet", {"base_channels": 16})),
            train=TrainConfig(**train_doc),
            clusters=int(doc.get("clusters", 3)),
            threads=doc.get("threads"),
        )

    def to_dict(self) -> dict:
        data = {}
        if self.synth is not None:
            data["synth"] = asdict(self.synth)
        if self.manifest is not None:
            data["manifest"] = str(self.manifest)
        return {
            "out": str(self.out_dir),
            "data": data,
            "k": self.k,
            "seed": self.seed,
            "gt_sources": list(self.gt_sources),
            "augment": asdict(self.augment),
            "unet": asdict(self.unet),
            "train": asdict(self.train),
            "clusters": self.clusters,
            "threads": self.threads,
        }


@dataclass
class RunReport:
    fold_rows: list[dict]
    validation_means: dict[str, dict[str, float]]
    vs_gold_means: dict[str, dict[str, float]]
    selected_cutoffs: dict[str, float]
    confusions: dict[str, dict[str, int]]
    classification: dict[str, dict[str, float | None]]
    checkpoints: list[str]
    config_echo: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _child_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedItem:
    id: str
    image: np.ndarray  # float32 SxS, ROI-cropped and resized
    gt1: np.ndarray  # uint8 SxS
    gt2: np.ndarray | None
    label: str


def _crop_mask(pixels: np.ndarray, roi: Roi) -> np.ndarray:
    r0, c0 = roi.center_row - roi.radius, roi.center_col - roi.radius
    side = 2 * roi.radius
    out = np.asarray(pixels, dtype=np.uint8)[r0 : r0 + side, c0 : c0 + side].copy()
    out[~Roi(roi.radius, roi.radius, roi.radius).disk_mask(out.shape)] = 0
    return out


def _prepare_items(cfg: RunConfig, manifest: DatasetManifest, need_gt2: bool):
    """Load, ROI-crop and resize every active item to the network frame."""
    size = (cfg.unet.input_size, cfg.unet.input_size)
    prepared = []
    for item in sorted(manifest.active_items(), key=lambda it: it.id):
        if item.roi is None:
            raise ManifestError(f"item {item.id} has no roi; rois are required")
        raw = RetroImage(item.id, load_image_png(manifest.path(item.image)), item.roi, item.label)
        cropped = crop_roi(raw)
        image = resize_bilinear(cropped.pixels, size)
        gt1 = resize_nearest(
            _crop_mask(load_manual_mask(manifest.path(item.gt1), raw).pixels, item.roi), size
        )
        gt2 = None
        if need_gt2:
            if item.gt2 is None:
                raise ManifestError(
                    f"item {item.id} has no gt2 mask; run the gt2 stage first"
                )
            gt2_mask = load_manual_mask(manifest.path(item.gt2), raw)
            gt2 = resize_nearest(_crop_mask(gt2_mask.pixels, item.roi), size)
        if item.label is None:
            raise ManifestError(f"item {item.id} has no clinical label")
        prepared.append(PreparedItem(item.id, image, gt1, gt2, item.label))
    return prepared


def _network_roi(cfg: RunConfig) -> Roi:
    half = cfg.unet.input_size // 2
    return Roi(half, half, half)


# ---------------------------------------------------------------------------
# stages


def stage_synth(cfg: RunConfig) -> DatasetManifest:
    if cfg.synth is not None:
        return synthesize_dataset(cfg.synth, _child_seed(cfg.seed, 10), cfg.out_dir / "data")
    # external dataset: import the manifest with resolved paths
    src = load_manifest(cfg.manifest)
    data_dir = cfg.out_dir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    items = [
        ManifestItem(
            id=it.id,
            image=str(src.path(it.image).resolve()),
            gt1=str(src.path(it.gt1).resolve()),
            gt2=str(src.path(it.gt2).resolve()) if it.gt2 else None,
            label=it.label,
            excluded=it.excluded,
            roi=it.roi,
        )
        for it in src.items
    ]
    manifest = DatasetManifest(items=items, root=data_dir)
    save_manifest(manifest, data_dir / "manifest.json")
    return manifest


def _working_manifest(cfg: RunConfig) -> DatasetManifest:
    path = cfg.out_dir / "data" / "manifest.json"
    if not path.exists():
        raise PipelineError("load-data", cause=FileNotFoundError(path))
    return load_manifest(path)


def generate_gt2_masks(
    manifest: DatasetManifest, manifest_path, seed: int, clusters: int = 3
) -> DatasetManifest:
    """Write automated masks next to the manifest and record them in it."""
    manifest_path = Path(manifest_path)
    gt2_dir = manifest_path.parent / "gt2"
    gt2_dir.mkdir(parents=True, exist_ok=True)
    for idx, item in enumerate(sorted(manifest.active_items(), key=lambda it: it.id)):
        if item.roi is None:
            raise ManifestError(f"item {item.id} has no roi")
        raw = RetroImage(item.id, load_image_png(manifest.path(item.image)), item.roi, item.label)
        cropped = crop_roi(raw)
        mask = generate_gt2(cropped, seed=_child_seed(seed, 20, idx), clusters=clusters)
        save_mask_png(gt2_dir / f"{item.id}.png", mask.pixels)
        item.gt2 = f"gt2/{item.id}.png"
    save_manifest(manifest, manifest_path)
    return manifest


def stage_gt2(cfg: RunConfig) -> DatasetManifest:
    """Generate automated masks for every active item and record them."""
    manifest = _working_manifest(cfg)
    return generate_gt2_masks(
        manifest, cfg.out_dir / "data" / "manifest.json", cfg.seed, cfg.clusters
    )


def stage_folds(cfg: RunConfig, manifest: DatasetManifest | None = None):
    manifest = manifest or _working_manifest(cfg)
    items = manifest.active_items()
    labels = {it.id: it.label for it in items}
    plan = make_folds([it.id for it in items], cfg.k, cfg.seed, labels=labels)
    doc = {
        "k": plan.k,
        "seed": plan.seed,
        "assignments": plan.assignments,
        "subsplits": plan.subsplits,
    }
    (cfg.out_dir / "folds.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return plan


def _fold_dir(cfg: RunConfig, gt_source: str, fold: int) -> Path:
    return cfg.out_dir / gt_source / f"fold{fold}"


def _mask_for(item: PreparedItem, gt_source: str) -> np.ndarray:
    return item.gt1 if gt_source == "gt1" else item.gt2


def stage_train(cfg: RunConfig, gt_source: str, fold: int) -> CheckpointRecord:
    if gt_source not in GT_SOURCES:
        raise ValueError(f"unknown gt source {gt_source!r}")
    manifest = _working_manifest(cfg)
    prepared = {p.id: p for p in _prepare_items(cfg, manifest, need_gt2=gt_source == "gt2")}
    plan = make_folds(
        sorted(prepared), cfg.k, cfg.seed, labels={i: p.label for i, p in prepared.items()}
    )
    train_ids = plan.ids_with_role(fold, "train")
    valid_ids = plan.ids_with_role(fold, "valid")

    pairs = [(prepared[i].image, _mask_for(prepared[i], gt_source)) for i in train_ids]
    gt_idx = GT_SOURCES.index(gt_source)
    stream = augment_stream(
        pairs,
        cfg.augment,
        epochs=cfg.train.epochs,
        steps_per_epoch=cfg.train.steps_per_epoch,
        batch_size=cfg.train.batch_size,
        seed=_child_seed(cfg.seed, 102, gt_idx, fold),
    )
    torch.manual_seed(_child_seed(cfg.seed, 101, gt_idx, fold))
    model = build_unet(cfg.unet)

    out = _fold_dir(cfg, gt_source, fold)
    out.mkdir(parents=True, exist_ok=True)
    record = train_model(
        model,
        stream,
        [prepared[i].image for i in valid_ids],
        [_mask_for(prepared[i], gt_source) for i in valid_ids],
        cfg.train,
        out / "checkpoint.npz",
    )
    write_history_csv(out / "history.csv", record.history)
    return record


def stage_evaluate(cfg: RunConfig):
    """Predict held-out folds, then write the segmentation metric tables."""
    manifest = _working_manifest(cfg)
    need_gt2 = "gt2" in cfg.gt_sources
    prepared = {p.id: p for p in _prepare_items(cfg, manifest, need_gt2=need_gt2)}
    plan = make_folds(
        sorted(prepared), cfg.k, cfg.seed, labels={i: p.label for i, p in prepared.items()}
    )
    tables = cfg.out_dir / "report" / "tables"
    tables.mkdir(parents=True, exist_ok=True)

    fold_rows = []
    gold_rows = []
    for gt_source in cfg.gt_sources:
        model_name = MODEL_FOR_SOURCE[gt_source]
        for fold in range(cfg.k):
            fold_dir = _fold_dir(cfg, gt_source, fold)
            ckpt = fold_dir / "checkpoint.npz"
            if not ckpt.exists():
                raise PipelineError("evaluate", fold, FileNotFoundError(ckpt))
            meta = read_checkpoint_meta(ckpt)
            if UNetConfig(**meta["config"]) != cfg.unet:
                raise PipelineError(
                    "evaluate", fold, ValueError("checkpoint config mismatch")
                )
            test_ids = plan.fold_ids(fold)
            preds = predict(ckpt, [prepared[i].image for i in test_ids])
            pred_dir = fold_dir / "preds"
            pred_dir.mkdir(exist_ok=True)
            for image_id, mask in zip(test_ids, preds):
                save_mask_png(pred_dir / f"{image_id}.png", mask.pixels)
                gold_rows.append(
                    {
                        "model": model_name,
                        "id": image_id,
                        "dice": seg_metrics.dice(mask, prepared[image_id].gt1),
                        "iou": seg_metrics.iou(mask, prepared[image_id].gt1),
                    }
                )
            extra = meta.get("extra", {})
            fold_rows.append(
                {
                    "model": model_name,
                    "gt_source": gt_source,
                    "fold": fold,
                    "n_train": len(plan.ids_with_role(fold, "train")),
                    "n_valid": len(plan.ids_with_role(fold, "valid")),
                    "n_test": len(test_ids),
                    "best_epoch": extra.get("epoch"),
                    "valid_dice": extra.get("valid_dice"),
                    "valid_iou": extra.get("valid_iou"),
                    "valid_accuracy": extra.get("valid_accuracy"),
                }
            )

    with open(tables / "segmentation_validation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "model",
                "gt_source",
                "fold",
                "n_train",
                "n_valid",
                "n_test",
                "best_epoch",
                "valid_dice",
                "valid_iou",
                "valid_accuracy",
            ]
        )
        for row in fold_rows:
            writer.writerow(
                [
                    row["model"],
                    row["gt_source"],
                    row["fold"],
                    row["n_train"],
                    row["n_valid"],
                    row["n_test"],
                    row["best_epoch"],
                    format_metric(row["valid_dice"]),
                    format_metric(row["valid_iou"]),
                    format_metric(row["valid_accuracy"]),
                ]
            )
    with open(tables / "test_vs_gold.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "id", "dice", "iou"])
        for row in gold_rows:
            writer.writerow(
                [row["model"], row["id"], format_metric(row["dice"]), format_metric(row["iou"])]
            )
    return fold_rows, gold_rows


def _pooled_areas(cfg: RunConfig, plan, prepared, gt_source: str) -> list[AreaRecord]:
    """Out-of-fold predicted areas: each case is classified exactly once."""
    roi = _network_roi(cfg)
    model_name = MODEL_FOR_SOURCE[gt_source]
    records = []
    for fold in range(cfg.k):
        pred_dir = _fold_dir(cfg, gt_source, fold) / "preds"
        for image_id in plan.fold_ids(fold):
            path = pred_dir / f"{image_id}.png"
            if not path.exists():
                raise PipelineError("select-cutoff", fold, FileNotFoundError(path))
            pixels = (load_image_png(path) > 0.5).astype(np.uint8)
            records.append(AreaRecord(image_id, area_percent(pixels, roi), model_name))
    return sorted(records, key=lambda r: r.image_id)


CURVE_COLUMNS = ("cutoff", "tp", "fp", "fn", "tn", "precision", "recall", "fpr", "selected")


def write_curve_csv(path, curve: CutoffCurve, selected: CutoffPoint | None = None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for p in curve.points:
            writer.writerow(
                [
                    f"{p.cutoff:.6f}",
                    p.counts.tp,
                    p.counts.fp,
                    p.counts.fn,
                    p.counts.tn,
                    format_metric(p.precision),
                    format_metric(p.recall),
                    format_metric(p.fpr),
                    1 if selected is not None and p.cutoff == selected.cutoff else 0,
                ]
            )


def read_curve_csv(path) -> tuple[CutoffCurve, CutoffPoint | None]:
    def parse(v):
        return None if v == "n/a" else float(v)

    points = []
    selected = None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            point = CutoffPoint(
                cutoff=float(row["cutoff"]),
                counts=ConfusionCounts(
                    int(row["tp"]), int(row["fp"]), int(row["fn"]), int(row["tn"])
                ),
                precision=parse(row["precision"]),
                recall=parse(row["recall"]),
                fpr=parse(row["fpr"]),
            )
            points.append(point)
            if row["selected"] == "1":
                selected = point
    return CutoffCurve(points), selected


def stage_select_cutoff(cfg: RunConfig):
    """Sweep candidate cutoffs from the manual-GT negative areas and pick the
    operating point per model."""
    manifest = _working_manifest(cfg)
    need_gt2 = "gt2" in cfg.gt_sources
    prepared = {p.id: p for p in _prepare_items(cfg, manifest, need_gt2=need_gt2)}
    plan = make_folds(
        sorted(prepared), cfg.k, cfg.seed, labels={i: p.label for i, p in prepared.items()}
    )
    roi = _network_roi(cfg)
    labels = {i: p.label for i, p in prepared.items()}

    negative_areas = [
        area_percent(p.gt1, roi) for p in prepared.values() if p.label == NEGATIVE
    ]
    candidates = candidate_cutoffs(negative_areas)

    curves_dir = cfg.out_dir / "report" / "curves"
    curves_dir.mkdir(parents=True, exist_ok=True)
    tables = cfg.out_dir / "report" / "tables"
    tables.mkdir(parents=True, exist_ok=True)

    all_areas = []
    selected_doc = {}
    results = {}
    for gt_source in cfg.gt_sources:
        model_name = MODEL_FOR_SOURCE[gt_source]
        areas = _pooled_areas(cfg, plan, prepared, gt_source)
        all_areas.extend(areas)
        curve = sweep_cutoffs(areas, labels, candidates)
        chosen = select_cutoff(curve)
        write_curve_csv(curves_dir / f"cutoff_curve_{model_name}.csv", curve, chosen)
        selected_doc[model_name] = {
            "cutoff": chosen.cutoff,
            "recall": chosen.recall,
            "precision": chosen.precision,
            "fpr": chosen.fpr,
        }
        results[model_name] = (curve, chosen)

    with open(tables / "areas.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "id", "area_percent"])
        for rec in sorted(all_areas, key=lambda r: (r.model, r.image_id)):
            writer.writerow([rec.model, rec.image_id, f"{rec.area_percent:.6f}"])

    (curves_dir / "selected_cutoffs.json").write_text(
        json.dumps(selected_doc, indent=2, sort_keys=True) + "\n"
    )
    return results


def _load_areas(cfg: RunConfig) -> dict[str, list[AreaRecord]]:
    path = cfg.out_dir / "report" / "tables" / "areas.csv"
    if not path.exists():
        raise PipelineError("classify", cause=FileNotFoundError(path))
    by_model: dict[str, list[AreaRecord]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            by_model.setdefault(row["model"], []).append(
                AreaRecord(row["id"], float(row["area_percent"]), row["model"])
            )
    return by_model


def _load_selected(cfg: RunConfig) -> dict[str, dict]:
    path = cfg.out_dir / "report" / "curves" / "selected_cutoffs.json"
    if not path.exists():
        raise PipelineError("classify", cause=FileNotFoundError(path))
    return json.loads(path.read_text())


def stage_classify(cfg: RunConfig):
    """Label every pooled case at its model's selected cutoff."""
    manifest = _working_manifest(cfg)
    labels = {it.id: it.label for it in manifest.active_items()}
    areas = _load_areas(cfg)
    selected = _load_selected(cfg)
    tables = cfg.out_dir / "report" / "tables"
    tables.mkdir(parents=True, exist_ok=True)

    confusions = {}
    metrics_rows = {}
    for gt_source in cfg.gt_sources:
        model_name = MODEL_FOR_SOURCE[gt_source]
        cutoff = float(selected[model_name]["cutoff"])
        records = sorted(areas[model_name], key=lambda r: r.image_id)
        predictions = [classify_case(r.area_percent, cutoff) for r in records]
        truth = [labels[r.image_id] for r in records]
        counts = confusion(predictions, truth)
        m = classification_metrics(counts)
        confusions[model_name] = counts
        metrics_rows[model_name] = (cutoff, counts, m)

        with open(tables / f"classifications_{model_name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "clinical", "area_percent", "predicted", "outcome"])
            for rec, pred, true in zip(records, predictions, truth):
                outcome = ("T" if pred == true else "F") + ("P" if pred == "positive" else "N")
                writer.writerow(
                    [rec.image_id, true, f"{rec.area_percent:.6f}", pred, outcome]
                )

    with open(tables / "classification_metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model", "cutoff", "tp", "fp", "fn", "tn", "recall", "precision", "fpr", "f1", "f2"]
        )
        for model_name, (cutoff, counts, m) in sorted(metrics_rows.items()):
            writer.writerow(
                [
                    model_name,
                    f"{cutoff:.6f}",
                    counts.tp,
                    counts.fp,
                    counts.fn,
                    counts.tn,
                    format_metric(m.recall),
                    format_metric(m.precision),
                    format_metric(m.fpr),
                    format_metric(m.f1),
                    format_metric(m.f2),
                ]
            )
    return metrics_rows


# ---------------------------------------------------------------------------
# plots


def _plot_curve(ax, curve: CutoffCurve, selected, x_attr: str, y_attr: str, label: str):
    xs, ys = [], []
    for p in curve.points:
        x, y = getattr(p, x_attr), getattr(p, y_attr)
        if x is not None and y is not None:
            xs.append(x)
            ys.append(y)
    line = ax.plot(xs, ys, marker="o", markersize=3, label=label)[0]
    if selected is not None:
        x, y = getattr(selected, x_attr), getattr(selected, y_attr)
        if x is not None and y is not None:
            ax.plot([x], [y], marker="*", markersize=14, color=line.get_color())
            ax.annotate(f"cutoff={selected.cutoff:.2f}", (x, y), textcoords="offset points", xytext=(6, 6))


def emit_curves(
    curve_m1: CutoffCurve | None,
    curve_m2: CutoffCurve | None,
    out_dir,
    selected_m1: CutoffPoint | None = None,
    selected_m2: CutoffPoint | None = None,
) -> list[Path]:
    """Write the PR and ROC plots (SVG) plus one curve CSV per model."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.touch()
        probe.unlink()
    except OSError as e:
        raise ValueError(f"cannot write curve outputs to {out_dir}: {e}") from e
    entries = [
        ("model1", curve_m1, selected_m1),
        ("model2", curve_m2, selected_m2),
    ]
    entries = [(name, c, s) for name, c, s in entries if c is not None]
    if not entries:
        raise ValueError("no curves to plot")

    written = []
    for name, curve, sel in entries:
        path = out_dir / f"cutoff_curve_{name}.csv"
        write_curve_csv(path, curve, sel)
        written.append(path)

    for fname, x_attr, y_attr, x_label, y_label, title in (
        ("pr_curve.svg", "recall", "precision", "Recall", "Precision", "Precision-recall curve"),
        ("roc_curve.svg", "fpr", "recall", "False positive rate", "Recall / TPR", "ROC curve"),
    ):
        fig, ax = plt.subplots(figsize=(5, 4))
        for name, curve, sel in entries:
            _plot_curve(ax, curve, sel, x_attr, y_attr, name)
        ax.set_xlabel(x_label)
        ax.set_ylabel(y_label)
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def emit_scatter(
    areas_m1: list[AreaRecord],
    areas_m2: list[AreaRecord],
    labels: dict[str, str],
    out_dir,
    cutoff_m1: float | None = None,
    cutoff_m2: float | None = None,
) -> list[Path]:
    """Per-case area scatter (model1 vs model2) with misclassifications marked."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m1 = {r.image_id: r.area_percent for r in areas_m1}
    m2 = {r.image_id: r.area_percent for r in areas_m2}
    if set(m1) != set(m2):
        diff = sorted(set(m1) ^ set(m2))
        raise ValueError(f"area records disagree on ids: {diff}")

    rows = []
    for image_id in sorted(m1):
        label = labels[image_id]
        a1, a2 = m1[image_id], m2[image_id]
        pred1 = classify_case(a1, cutoff_m1) if cutoff_m1 is not None else None
        pred2 = classify_case(a2, cutoff_m2) if cutoff_m2 is not None else None
        rows.append(
            {
                "id": image_id,
                "label": label,
                "area_model1": a1,
                "area_model2": a2,
                "pred_model1": pred1,
                "pred_model2": pred2,
                "misclassified_model1": int(pred1 is not None and pred1 != label),
                "misclassified_model2": int(pred2 is not None and pred2 != label),
                "disagreement": int(pred1 is not None and pred2 is not None and pred1 != pred2),
            }
        )

    csv_path = out_dir / "area_scatter.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "id",
                "label",
                "area_model1",
                "area_model2",
                "pred_model1",
                "pred_model2",
                "misclassified_model1",
                "misclassified_model2",
                "disagreement",
            ]
        )
        for row in rows:
            writer.writerow(
                [
                    row["id"],
                    row["label"],
                    f"{row['area_model1']:.6f}",
                    f"{row['area_model2']:.6f}",
                    row["pred_model1"] or "",
                    row["pred_model2"] or "",
                    row["misclassified_model1"],
                    row["misclassified_model2"],
                    row["disagreement"],
                ]
            )

    fig, ax = plt.subplots(figsize=(5, 5))
    for label, color in ((NEGATIVE, "tab:blue"), ("positive", "tab:red")):
        xs = [r["area_model1"] for r in rows if r["label"] == label]
        ys = [r["area_model2"] for r in rows if r["label"] == label]
        ax.scatter(xs, ys, s=18, color=color, label=label, alpha=0.8)
    bad_x = [
        r["area_model1"]
        for r in rows
        if r["misclassified_model1"] or r["misclassified_model2"]
    ]
    bad_y = [
        r["area_model2"]
        for r in rows
        if r["misclassified_model1"] or r["misclassified_model2"]
    ]
    if bad_x:
        ax.scatter(bad_x, bad_y, s=90, facecolors="none", edgecolors="black", label="misclassified")
    if cutoff_m1 is not None:
        ax.axvline(cutoff_m1, linestyle="--", linewidth=0.8, color="gray")
    if cutoff_m2 is not None:
        ax.axhline(cutoff_m2, linestyle="--", linewidth=0.8, color="gray")
    ax.set_xlabel("Area percent (model1)")
    ax.set_ylabel("Area percent (model2)")
    ax.set_title("Opacity area per case")
    ax.legend()
    fig.tight_layout()
    svg_path = out_dir / "area_scatter.svg"
    fig.savefig(svg_path)
    plt.close(fig)
    return [csv_path, svg_path]


# ---------------------------------------------------------------------------
# report assembly + full run


def _mean(values):
    return float(np.mean(values)) if values else None


def stage_report(cfg: RunConfig) -> RunReport:
    tables = cfg.out_dir / "report" / "tables"
    curves_dir = cfg.out_dir / "report" / "curves"

    fold_rows = []
    with open(tables / "segmentation_validation.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            fold_rows.append(
                {
                    "model": row["model"],
                    "gt_source": row["gt_source"],
                    "fold": int(row["fold"]),
                    "n_train": int(row["n_train"]),
                    "n_valid": int(row["n_valid"]),
                    "n_test": int(row["n_test"]),
                    "best_epoch": int(row["best_epoch"]),
                    "valid_dice": float(row["valid_dice"]),
                    "valid_iou": float(row["valid_iou"]),
                    "valid_accuracy": float(row["valid_accuracy"]),
                }
            )
    validation_means = {}
    for model_name in sorted({r["model"] for r in fold_rows}):
        rows = [r for r in fold_rows if r["model"] == model_name]
        validation_means[model_name] = {
            "dice": _mean([r["valid_dice"] for r in rows]),
            "iou": _mean([r["valid_iou"] for r in rows]),
            "accuracy": _mean([r["valid_accuracy"] for r in rows]),
        }

    vs_gold: dict[str, dict[str, list[float]]] = {}
    with open(tables / "test_vs_gold.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            entry = vs_gold.setdefault(row["model"], {"dice": [], "iou": []})
            entry["dice"].append(float(row["dice"]))
            entry["iou"].append(float(row["iou"]))
    vs_gold_means = {
        model: {"dice": _mean(v["dice"]), "iou": _mean(v["iou"])}
        for model, v in sorted(vs_gold.items())
    }

    selected = _load_selected(cfg)
    curves = {}
    for gt_source in cfg.gt_sources:
        model_name = MODEL_FOR_SOURCE[gt_source]
        curves[model_name] = read_curve_csv(curves_dir / f"cutoff_curve_{model_name}.csv")

    emit_curves(
        curves.get("model1", (None, None))[0],
        curves.get("model2", (None, None))[0],
        curves_dir,
        selected_m1=curves.get("model1", (None, None))[1],
        selected_m2=curves.get("model2", (None, None))[1],
    )

    manifest = _working_manifest(cfg)
    labels = {it.id: it.label for it in manifest.active_items()}
    areas = _load_areas(cfg)
    if "model1" in areas and "model2" in areas:
        emit_scatter(
            areas["model1"],
            areas["model2"],
            labels,
            cfg.out_dir / "report" / "scatter",
            cutoff_m1=float(selected["model1"]["cutoff"]),
            cutoff_m2=float(selected["model2"]["cutoff"]),
        )

    confusions = {}
    classification = {}
    with open(tables / "classification_metrics.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            confusions[row["model"]] = {
                "tp": int(row["tp"]),
                "fp": int(row["fp"]),
                "fn": int(row["fn"]),
                "tn": int(row["tn"]),
            }
            classification[row["model"]] = {
                key: (None if row[key] == "n/a" else float(row[key]))
                for key in ("recall", "precision", "fpr", "f1", "f2")
            }

    checkpoints = sorted(
        str(p.relative_to(cfg.out_dir)) for p in cfg.out_dir.glob("gt*/fold*/checkpoint.npz")
    )
    report = RunReport(
        fold_rows=fold_rows,
        validation_means=validation_means,
        vs_gold_means=vs_gold_means,
        selected_cutoffs={m: float(doc["cutoff"]) for m, doc in selected.items()},
        confusions=confusions,
        classification=classification,
        checkpoints=checkpoints,
        config_echo=cfg.to_dict(),
    )
    (cfg.out_dir / "report" / "report.json").write_text(report.to_json() + "\n")
    return report


def apply_thread_limit(cfg: RunConfig):
    if cfg.threads is not None:
        torch.set_num_threads(cfg.threads)


def run_pipeline(cfg: RunConfig) -> RunReport:
    """Run every stage in order; any failure aborts with stage name and fold."""
    apply_thread_limit(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)

    def run(stage_name, fn, *args, fold=None):
        try:
            return fn(*args)
        except PipelineError:
            raise
        except Exception as e:
            raise PipelineError(stage_name, fold, e) from e

    manifest = run("synth", stage_synth, cfg)
    if "gt2" in cfg.gt_sources:
        manifest = run("gt2", stage_gt2, cfg)
    run("folds", stage_folds, cfg, manifest)
    for gt_source in cfg.gt_sources:
        for fold in range(cfg.k):
            run(f"train[{gt_source}]", stage_train, cfg, gt_source, fold, fold=fold)
    run("evaluate", stage_evaluate, cfg)
    run("select-cutoff", stage_select_cutoff, cfg)
    run("classify", stage_classify, cfg)
    return run("report", stage_report, cfg)
