"""Image-level and pixel-level accuracy/F1, per-stage confusion matrices, and
per-generator-family breakdowns. Pixel metrics pool confusion counts over the
whole dataset (micro); multi-class image F1 is macro-averaged."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

GAN_TAGS = ("ganfull", "ganpart-img", "ganpart-txt")
DM_TAGS = ("dmfull-img", "dmfull-txt", "dmpart-img", "dmpart-txt")


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """F1 of the positive class; 1.0 when nothing was positive anywhere (documented
    convention), 0.0 when positives exist but none were hit."""
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    return 2 * tp / (2 * tp + fp + fn)


def image_level_metrics(predictions, labels) -> tuple[float, float]:
    """Binary accuracy and forged-class F1 over images."""
    preds = np.asarray(predictions, dtype=int)
    labs = np.asarray(labels, dtype=int)
    if preds.size == 0:
        raise ValueError("empty input")
    if preds.shape != labs.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labs.shape}")
    acc = float((preds == labs).mean())
    tp = int(((preds == 1) & (labs == 1)).sum())
    fp = int(((preds == 1) & (labs == 0)).sum())
    fn = int(((preds == 0) & (labs == 1)).sum())
    return acc, f1_from_counts(tp, fp, fn)


def multiclass_confusion(predictions, labels, n_classes: int) -> np.ndarray:
    preds = np.asarray(predictions, dtype=int)
    labs = np.asarray(labels, dtype=int)
    mat = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(mat, (labs, preds), 1)
    return mat


def macro_f1(confusion: np.ndarray) -> float:
    scores = []
    for c in range(confusion.shape[0]):
        tp = int(confusion[c, c])
        fp = int(confusion[:, c].sum() - tp)
        fn = int(confusion[c, :].sum() - tp)
        if tp + fp + fn == 0:
            continue  # class absent entirely; skip from the macro average
        scores.append(f1_from_counts(tp, fp, fn))
    return float(np.mean(scores)) if scores else 1.0


def pixel_confusion(pred_masks, gt_masks, threshold: float = 0.5):
    preds = np.asarray(pred_masks, dtype=np.float64)
    gts = np.asarray(gt_masks, dtype=np.float64)
    if preds.shape != gts.shape:
        raise ValueError(f"resolution mismatch: {preds.shape} vs {gts.shape}")
    p = preds >= threshold
    y = gts >= 0.5
    tp = int((p & y).sum())
    fp = int((p & ~y).sum())
    fn = int((~p & y).sum())
    tn = int((~p & ~y).sum())
    return tp, fp, fn, tn


def pixel_level_metrics(pred_masks, gt_masks, threshold: float = 0.5) -> tuple[float, float]:
    """Micro-aggregated pixel accuracy and forged-class F1."""
    tp, fp, fn, tn = pixel_confusion(pred_masks, gt_masks, threshold)
    total = tp + fp + fn + tn
    if total == 0:
        raise ValueError("empty input")
    return (tp + tn) / total, f1_from_counts(tp, fp, fn)


@dataclass
class MetricsReport:
    image_acc: float
    image_f1: float
    pixel_acc: float
    pixel_f1: float
    stage_confusions: list = field(default_factory=list)
    per_method: dict = field(default_factory=dict)
    n_samples: int = 0

    def to_json_record(self) -> str:
        return json.dumps({
            "image_acc": self.image_acc,
            "image_f1": self.image_f1,
            "pixel_acc": self.pixel_acc,
            "pixel_f1": self.pixel_f1,
            "per_method": self.per_method,
            "stage_confusions": [c.tolist() if isinstance(c, np.ndarray) else c
                                 for c in self.stage_confusions],
            "n_samples": self.n_samples,
        })

    def render_table(self) -> str:
        """Console table, one row per task, family columns then their average."""
        header = f"{'':14s}{'GAN-based':>18s}{'DM-based':>18s}{'AVG':>18s}"
        sub = f"{'':14s}" + "".join(f"{'ACC':>9s}{'F1':>9s}" for _ in range(3))
        lines = [header, sub]
        for task, tkey in (("detection", "det"), ("localization", "loc")):
            cells = []
            for fam in ("gan", "dm", "avg"):
                stats = self.per_method.get(fam, {})
                cells.append(f"{100 * stats.get(f'{tkey}_acc', float('nan')):9.2f}"
                             f"{100 * stats.get(f'{tkey}_f1', float('nan')):9.2f}")
            lines.append(f"{task:14s}" + "".join(cells))
        return "\n".join(lines)


def _family_of(tag: str) -> str | None:
    if tag in GAN_TAGS:
        return "gan"
    if tag in DM_TAGS:
        return "dm"
    return None


def compute_report(stage_predictions, label_paths, pred_masks, gt_masks,
                   method_tags, stage_sizes=(2, 3, 5, 8)) -> MetricsReport:
    """Assemble the full evaluation report from per-sample predictions.

    stage_predictions: (N,4) predicted class index per stage.
    label_paths:       (N,4) true class index per stage.
    pred_masks/gt_masks: (N,H,W) finest-stage forged probabilities / binary truth.
    """
    stage_preds = np.asarray(stage_predictions, dtype=int)
    labels = np.asarray(label_paths, dtype=int)
    if stage_preds.size == 0:
        raise ValueError("empty evaluation split")
    img_acc, img_f1 = image_level_metrics(stage_preds[:, 0], labels[:, 0])
    pix_acc, pix_f1 = pixel_level_metrics(pred_masks, gt_masks)
    confusions = [
        multiclass_confusion(stage_preds[:, t], labels[:, t], k)
        for t, k in enumerate(stage_sizes)
    ]

    per_method: dict[str, dict] = {}
    fams = np.array([_family_of(t) or "real" for t in method_tags])
    for fam in ("gan", "dm"):
        idx = (fams == fam) | (fams == "real")
        if not idx.any():
            continue
        d_acc, d_f1 = image_level_metrics(stage_preds[idx, 0], labels[idx, 0])
        l_acc, l_f1 = pixel_level_metrics(np.asarray(pred_masks)[idx], np.asarray(gt_masks)[idx])
        per_method[fam] = {"det_acc": d_acc, "det_f1": d_f1, "loc_acc": l_acc, "loc_f1": l_f1}
    if "gan" in per_method and "dm" in per_method:
        per_method["avg"] = {
            k: (per_method["gan"][k] + per_method["dm"][k]) / 2
            for k in per_method["gan"]
        }

    return MetricsReport(
        image_acc=img_acc, image_f1=img_f1, pixel_acc=pix_acc, pixel_f1=pix_f1,
        stage_confusions=confusions, per_method=per_method, n_samples=len(stage_preds),
    )
