"""Flat segmentation metrics and hierarchical (taxonomy-aware) scores."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .taxonomy import ConceptGraph, InformationContentTable


class UndefinedMetricError(ValueError):
    pass


@dataclass
class FlatMetrics:
    pixel_accuracy: float
    mean_accuracy: float
    mean_iou: float
    weighted_iou: float
    class_accuracy: np.ndarray = field(repr=False)
    class_iou: np.ndarray = field(repr=False)
    confusion: np.ndarray = field(repr=False)


def confusion_counts(pred, gt, num_classes: int, ignore_label: int | None = None, weights=None):
    """Weighted confusion matrix (rows gt, cols pred) over non-ignored pixels.

    Also returns the per-class gt total, which includes pixels whose prediction
    falls outside ``0..num_classes-1`` (those count as misses).
    """
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and ground truth differ in size: {pred.size} vs {gt.size}")
    w = np.ones(gt.size) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    keep = gt != ignore_label if ignore_label is not None else np.ones(gt.size, bool)
    if np.any((gt[keep] < 0) | (gt[keep] >= num_classes)):
        raise ValueError("ground-truth label outside 0..num_classes-1")
    if not keep.any():
        raise UndefinedMetricError("no pixels to evaluate (all ignored or empty)")
    g, p, w = gt[keep], pred[keep], w[keep]
    in_range = (p >= 0) & (p < num_classes)
    conf = np.bincount(
        g[in_range] * num_classes + p[in_range], weights=w[in_range], minlength=num_classes * num_classes
    ).reshape(num_classes, num_classes)
    gt_total = np.bincount(g, weights=w, minlength=num_classes)
    return conf, gt_total


def flat_metrics(pred_map, gt_map, num_classes: int, ignore_label: int | None = 255, weights=None) -> FlatMetrics:
    """Pixel accuracy, class-mean accuracy, mean IoU and gt-frequency-weighted IoU.

    Class means skip classes absent from the ground truth (accuracy) or from
    both ground truth and prediction (IoU).
    """
    if np.shape(pred_map) != np.shape(gt_map):
        raise ValueError(f"shape mismatch: {np.shape(pred_map)} vs {np.shape(gt_map)}")
    conf, gt_total = confusion_counts(pred_map, gt_map, num_classes, ignore_label, weights)
    tp = np.diag(conf)
    pred_total = conf.sum(0)
    total = gt_total.sum()
    union = gt_total + pred_total - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(gt_total > 0, tp / gt_total, np.nan)
        iou = np.where(union > 0, tp / union, np.nan)
    present = gt_total > 0
    return FlatMetrics(
        pixel_accuracy=float(tp.sum() / total),
        mean_accuracy=float(np.mean(acc[present])),
        mean_iou=float(np.mean(iou[union > 0])),
        weighted_iou=float(np.sum(gt_total[present] / total * iou[present])),
        class_accuracy=acc,
        class_iou=iou,
        confusion=conf,
    )


def hierarchical_scores(graph: ConceptGraph, l: int, p: int) -> tuple[float, float, float]:
    """Hierarchical precision, recall and F-score of predicting ``p`` for label ``l``."""
    d_lca = float(graph.depth[graph.lca(l, p)])
    d_l = float(graph.depth[l])
    d_p = float(graph.depth[p])
    return d_lca / d_p, d_lca / d_l, 2.0 * d_lca / (d_l + d_p)


def info_content_ratio(graph: ConceptGraph, ic: InformationContentTable, l: int, p: int) -> float:
    """Share of label and prediction information carried by their LCA, in [0, 1]."""
    info = ic.information
    if l == p and ic.frequency[l] > 0:
        return 1.0
    denom = info[l] + info[p]
    if denom == 0:
        raise UndefinedMetricError(
            f"information content ratio undefined: {graph.names[l]!r} and {graph.names[p]!r} both have frequency 1"
        )
    return float(2.0 * info[graph.lca(l, p)] / denom)


def hierarchical_tables(graph: ConceptGraph, ic: InformationContentTable | None, labels, concepts):
    """Score lookup tables for every (label, concept) combination.

    Returns ``(hp, hr, hf, si)`` arrays of shape ``(len(labels), len(concepts))``;
    ``si`` is None without an information table.
    """
    labels = list(labels)
    concepts = list(concepts)
    d = graph.depth.astype(np.float64)
    lca = np.array([[graph.lca(l, c) for c in concepts] for l in labels], dtype=np.int64).reshape(
        len(labels), len(concepts)
    )
    dl = d[labels][:, None]
    dp = d[concepts][None, :]
    dlca = d[lca]
    hp, hr, hf = dlca / dp, dlca / dl, 2.0 * dlca / (dl + dp)
    si = None
    if ic is not None:
        info = ic.information
        denom = info[labels][:, None] + info[concepts][None, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            si = 2.0 * info[lca] / denom
        same = np.array(labels)[:, None] == np.array(concepts)[None, :]
        si = np.where(same & (ic.frequency[labels][:, None] > 0), 1.0, si)
    return hp, hr, hf, si


@dataclass
class MetricsReport:
    pixel_accuracy: float
    mean_accuracy: float
    mean_iou: float
    weighted_iou: float
    hier_precision: float
    hier_recall: float
    hier_f: float
    info_ratio: float
    count: int
    per_class: list = field(default_factory=list)  # (name, acc, iou)

    SUMMARY = (
        "pixel_accuracy", "mean_accuracy", "mean_iou", "weighted_iou",
        "hier_precision", "hier_recall", "hier_f", "info_ratio",
    )

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.SUMMARY}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in self.SUMMARY:
            w.writerow([k, f"{getattr(self, k):.10g}"])
        w.writerow(["samples", self.count])
        w.writerow([])
        w.writerow(["class", "acc", "iou"])
        for name, acc, iou in self.per_class:
            w.writerow([name, f"{acc:.10g}", f"{iou:.10g}"])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'metric':<16} {'value':>10}", "-" * 27]
        lines += [f"{k:<16} {getattr(self, k):>10.4f}" for k in self.SUMMARY]
        lines.append(f"{'samples':<16} {self.count:>10d}")
        if self.per_class:
            width = max(5, max(len(n) for n, _, _ in self.per_class))
            lines += ["", f"{'class':<{width}} {'acc':>8} {'iou':>8}"]
            lines += [f"{n:<{width}} {a:>8.4f} {i:>8.4f}" for n, a, i in self.per_class]
        return "\n".join(lines)


def aggregate(graph: ConceptGraph, ic: InformationContentTable | None, predictions, ground_truth,
              weights=None, mode: str = "pixel") -> MetricsReport:
    """Dataset-level report over per-sample predictions of concept ids.

    ``weights`` are per-sample pixel counts (default 1 each). ``mode='pixel'``
    averages per-sample scores with those weights; ``mode='class'`` averages
    within each ground-truth class first, then across classes.
    """
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    gt = np.asarray(ground_truth, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {gt.size} labels")
    if pred.size == 0:
        raise UndefinedMetricError("no samples to aggregate")
    w = np.ones(pred.size) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != pred.shape:
        raise ValueError("weights length mismatch")

    labs = np.unique(gt)
    cons = np.unique(pred)
    hp_t, hr_t, hf_t, si_t = hierarchical_tables(graph, ic, labs, cons)
    li = np.searchsorted(labs, gt)
    ci = np.searchsorted(cons, pred)
    per = {"hp": hp_t[li, ci], "hr": hr_t[li, ci], "hf": hf_t[li, ci]}
    if si_t is not None:
        si = si_t[li, ci]
        if not np.all(np.isfinite(si)):
            raise UndefinedMetricError("information content ratio undefined for some samples")
        per["si"] = si
    if mode == "pixel":
        mean = {k: float(np.sum(w * v) / np.sum(w)) for k, v in per.items()}
    elif mode == "class":
        mean = {}
        for k, v in per.items():
            cls_means = [np.sum(w[gt == c] * v[gt == c]) / np.sum(w[gt == c]) for c in labs]
            mean[k] = float(np.mean(cls_means))
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")

    fm = flat_metrics(pred, gt, len(graph), ignore_label=None, weights=w)
    per_class = [
        (graph.names[c], float(fm.class_accuracy[c]), float(fm.class_iou[c])) for c in labs
    ]
    return MetricsReport(
        pixel_accuracy=fm.pixel_accuracy, mean_accuracy=fm.mean_accuracy, mean_iou=fm.mean_iou,
        weighted_iou=fm.weighted_iou, hier_precision=mean["hp"], hier_recall=mean["hr"],
        hier_f=mean["hf"], info_ratio=mean.get("si", float("nan")), count=int(pred.size),
        per_class=per_class,
    )
