"""Segmentation metrics, report assembly, and convergence analysis.

IoU follows TP / (TP + FP + FN) with the 0/0 case (both masks empty)
defined as 1.0. Mean IoU is reported two ways: the default averages over
test cases; the per-class mode averages class-wise means first. FB-IoU
pools pixel counts over all episodes (micro-average) for the foreground
and background classes and averages the two pooled IoUs.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MIOU_MODES = ("paper", "per_class")


def pixel_counts(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.logical_and(pred, gt).sum())
    fp = int(np.logical_and(pred, ~gt).sum())
    fn = int(np.logical_and(~pred, gt).sum())
    tn = pred.size - tp - fp - fn
    return tp, fp, fn, tn


def _ratio(tp, fp, fn):
    denom = tp + fp + fn
    if denom == 0:
        return 1.0  # both masks empty: prediction matches ground truth exactly
    return tp / denom


def iou(pred, gt):
    """Intersection over union of two binary masks of equal dims."""
    tp, fp, fn, _ = pixel_counts(pred, gt)
    return _ratio(tp, fp, fn)


@dataclass
class EpisodeResult:
    class_id: int
    iou: float
    tp: int
    fp: int
    fn: int
    tn: int
    support_area_fraction: float


def episode_result(pred, gt, class_id, support_area_fraction):
    tp, fp, fn, tn = pixel_counts(pred, gt)
    return EpisodeResult(
        class_id=int(class_id),
        iou=_ratio(tp, fp, fn),
        tp=tp, fp=fp, fn=fn, tn=tn,
        support_area_fraction=float(support_area_fraction),
    )


def miou(results, mode="paper"):
    """Mean IoU over episodes ("paper") or over class means ("per_class")."""
    if mode not in MIOU_MODES:
        raise ValueError(f"unknown miou mode {mode!r}; valid: {MIOU_MODES}")
    results = list(results)
    if not results:
        raise ValueError("cannot average an empty result list")
    if mode == "paper":
        return float(np.mean([r.iou for r in results]))
    by_class = {}
    for r in results:
        by_class.setdefault(r.class_id, []).append(r.iou)
    return float(np.mean([np.mean(v) for v in by_class.values()]))


def fb_iou(results):
    """Class-agnostic mean of pooled foreground and background IoUs."""
    results = list(results)
    if not results:
        raise ValueError("cannot compute FB-IoU of an empty result list")
    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    tn = sum(r.tn for r in results)
    iou_f = _ratio(tp, fp, fn)
    # background as the positive class: misses and false alarms swap roles
    iou_b = _ratio(tn, fn, fp)
    return 0.5 * (iou_f + iou_b)


@dataclass
class SmallMaskStratum:
    threshold: float
    n: int
    miou: float = None


def stratified_small_mask(results, threshold=0.05):
    """Restrict to episodes whose support mask covers < threshold of the image."""
    subset = [r for r in results if r.support_area_fraction < threshold]
    if not subset:
        return SmallMaskStratum(threshold=threshold, n=0, miou=None)
    return SmallMaskStratum(threshold=threshold, n=len(subset), miou=miou(subset))


@dataclass
class MetricsReport:
    fold_index: int
    k: int
    n: int
    miou: float
    miou_per_class: float
    fb_iou: float
    per_class: dict
    small_mask: SmallMaskStratum
    schema_version: int = 1

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "fold_index": self.fold_index,
            "k": self.k,
            "n": self.n,
            "miou": self.miou,
            "miou_per_class": self.miou_per_class,
            "fb_iou": self.fb_iou,
            "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
            "small_mask": {
                "threshold": self.small_mask.threshold,
                "n": self.small_mask.n,
                "miou": self.small_mask.miou,
            },
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def build_report(results, fold_index, k, small_mask_threshold=0.05):
    results = list(results)
    by_class = {}
    for r in results:
        by_class.setdefault(r.class_id, []).append(r.iou)
    return MetricsReport(
        fold_index=fold_index,
        k=k,
        n=len(results),
        miou=miou(results, "paper"),
        miou_per_class=miou(results, "per_class"),
        fb_iou=fb_iou(results),
        per_class={c: float(np.mean(v)) for c, v in by_class.items()},
        small_mask=stratified_small_mask(results, small_mask_threshold),
    )


def write_fold_table(reports, num_folds, path):
    """CSV with one mIoU column per fold plus the overall mIoU and FB-IoU.

    ``reports`` maps fold index to MetricsReport; folds not present stay
    blank so partial runs still line up with the full table layout.
    """
    path = Path(path)
    header = [f"fold_{i}" for i in range(num_folds)] + ["miou", "fb_iou", "n"]
    present = [reports[i] for i in sorted(reports)]
    row = []
    for i in range(num_folds):
        row.append(f"{reports[i].miou:.6f}" if i in reports else "")
    row.append(f"{np.mean([r.miou for r in present]):.6f}")
    row.append(f"{np.mean([r.fb_iou for r in present]):.6f}")
    row.append(str(sum(r.n for r in present)))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerow(row)


# ---------------------------------------------------------------------------
# convergence analysis over training logs
# ---------------------------------------------------------------------------


def time_to_threshold(log, target=0.60):
    """First validation entry reaching the target mIoU.

    Returns (step, wallclock_ms) of the first logged validation whose
    mIoU is >= target, or None if the log never crosses it.
    """
    for entry in log.entries:
        if entry.val_miou is not None and entry.val_miou >= target:
            return entry.step, entry.wallclock_ms
    return None


def convergence_speedup(log, baseline, target=0.60):
    """Wallclock speedup of ``log`` over ``baseline`` to reach the target.

    Ratio of the baseline's crossing time to this log's crossing time;
    None when either never crosses.
    """
    ours = time_to_threshold(log, target)
    theirs = time_to_threshold(baseline, target)
    if ours is None or theirs is None:
        return None
    return theirs[1] / ours[1]
