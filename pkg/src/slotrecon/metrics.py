"""Evaluation measures for object discovery, localization and semantic segmentation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .masks import BoundingBox


@dataclass
class MetricsReport:
    task: str
    metrics: dict[str, float]
    settings: dict = field(default_factory=dict)
    per_image: dict[str, list] = field(default_factory=dict)
    excluded: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True, default=_jsonable)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def contingency_table(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Counts of co-occurring labels, rows = ground truth, columns = prediction."""
    _, gt_idx = np.unique(gt, return_inverse=True)
    _, pred_idx = np.unique(pred, return_inverse=True)
    table = np.zeros((gt_idx.max(initial=-1) + 1, pred_idx.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (gt_idx.ravel(), pred_idx.ravel()), 1)
    return table


def _pairs(x):
    return x * (x - 1) / 2.0


def adjusted_rand_index(pred: np.ndarray, gt: np.ndarray, foreground_only: bool = False) -> float:
    """Adjusted Rand index between two labelings of the same pixels.

    With ``foreground_only`` pixels whose ground-truth label is 0 are dropped
    first; if none remain the result is ``nan`` (undefined for this image).
    Two single-cluster labelings score 1.
    """
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"label shapes differ: {pred.shape} vs {gt.shape}")
    if foreground_only:
        keep = gt != 0
        pred, gt = pred[keep], gt[keep]
    n = gt.size
    if n == 0:
        return float("nan")
    table = contingency_table(pred, gt)
    index = _pairs(table).sum()
    row = _pairs(table.sum(axis=1)).sum()
    col = _pairs(table.sum(axis=0)).sum()
    total = _pairs(n)
    expected = row * col / total if total else 0.0
    max_index = (row + col) / 2
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def mean_best_overlap(pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> float:
    """Average over ground-truth masks of the best IoU reached by any predicted mask.

    Predictions may be reused for several ground-truth masks.
    """
    if len(gt_masks) == 0:
        raise ValueError("mean_best_overlap needs at least one ground-truth mask")
    if len(pred_masks) == 0:
        return 0.0
    pred = np.stack([np.asarray(m, bool).ravel() for m in pred_masks]).astype(np.float64)
    gt = np.stack([np.asarray(m, bool).ravel() for m in gt_masks]).astype(np.float64)
    inter = gt @ pred.T
    union = gt.sum(1)[:, None] + pred.sum(1)[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    return float(iou.max(axis=1).mean())


def label_masks(labels: np.ndarray, exclude: Sequence[int] = ()) -> list[np.ndarray]:
    return [labels == v for v in np.unique(labels) if v not in exclude]


def mbo_instance(pred_labels: np.ndarray, instances: np.ndarray) -> float:
    """mBO over object instances (ground-truth label 0 is background and skipped)."""
    return mean_best_overlap(label_masks(pred_labels), label_masks(instances, exclude=(0,)))


def mbo_class(pred_labels: np.ndarray, class_map: np.ndarray) -> float:
    """mBO over per-class unions of instances."""
    return mean_best_overlap(label_masks(pred_labels), label_masks(class_map, exclude=(0,)))


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    inter = max(iw, 0) * max(ih, 0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def corloc_and_detection_rate(pred_boxes: Sequence[Sequence[BoundingBox]],
                              gt_boxes: Sequence[Sequence[BoundingBox]],
                              threshold: float = 0.5) -> tuple[float, float]:
    """CorLoc and detection rate over images; images without ground-truth boxes are skipped."""
    hits, rates = [], []
    for preds, gts in zip(pred_boxes, gt_boxes, strict=True):
        if len(gts) == 0:
            continue
        found = sum(any(box_iou(p, g) >= threshold for p in preds) for g in gts)
        hits.append(found > 0)
        rates.append(found / len(gts))
    if not rates:
        return float("nan"), float("nan")
    return float(np.mean(hits)), float(np.mean(rates))


def pool_slot_features(masks: np.ndarray, features: np.ndarray, min_mass: float = 1e-8):
    """Mask-weighted mean feature per slot, L2-normalised.

    ``masks`` is ``K x N`` (or ``K x rows x cols``), ``features`` ``N x D``.
    Returns the pooled vectors of slots with enough mass and their indices.
    """
    m = np.asarray(masks, np.float64).reshape(masks.shape[0], -1)
    h = np.asarray(features, np.float64)
    if m.shape[1] != h.shape[0]:
        raise ValueError(f"mask grid has {m.shape[1]} positions, features have {h.shape[0]}")
    mass = m.sum(axis=1)
    keep = np.flatnonzero(mass >= min_mass)
    pooled = (m[keep] @ h) / mass[keep, None]
    norms = np.linalg.norm(pooled, axis=1, keepdims=True)
    pooled = pooled / np.where(norms > 0, norms, 1.0)
    return pooled, keep


def _lloyd(x, centers, tol, max_iter):
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        assign = dist.argmin(axis=1)
        new = centers.copy()
        for j in range(len(centers)):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.abs(new - centers).max()
        centers = new
        if shift <= tol:
            break
    dist = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
    assign = dist.argmin(axis=1)
    return assign, float(dist[np.arange(len(x)), assign].sum()), centers


def kmeans(vectors: np.ndarray, k: int, restarts: int = 20, rng: np.random.Generator | int | None = 0,
           tol: float = 1e-6, max_iter: int = 300):
    """Lloyd's k-means, best of ``restarts`` runs by inertia.

    Each restart initialises at ``k`` distinct input vectors chosen uniformly.
    Returns ``(assignments, inertia, centers)``.
    """
    x = np.asarray(vectors, np.float64)
    if len(x) < k:
        raise ValueError(f"k-means needs at least k={k} vectors, got {len(x)}")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(rng)
    pool = np.unique(x, axis=0)
    if len(pool) < k:
        pool = x
    best = None
    for _ in range(restarts):
        init = pool[rng.choice(len(pool), size=k, replace=False)]
        result = _lloyd(x, init, tol, max_iter)
        if best is None or result[1] < best[1]:
            best = result
    return best


def hungarian_match(scores: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    """Maximum-total one-to-one assignment of rows to columns.

    Returns matched ``(row, col)`` pairs sorted by row and the total score.
    Rows left without a column (more rows than columns) are absent.
    """
    scores = np.asarray(scores, np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("score matrix must be finite")
    rows, cols = linear_sum_assignment(scores, maximize=True)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return pairs, float(sum(scores[r, c] for r, c in pairs))


@dataclass
class SlotPrediction:
    """Per-image input to semantic segmentation: hard slot labels and pooled slot vectors."""

    slot_labels: np.ndarray
    vectors: np.ndarray
    slot_ids: np.ndarray


def _segmentation_once(preds: Sequence[SlotPrediction], class_maps: Sequence[np.ndarray],
                       n_clusters: int, n_classes: int, restarts: int, seed):
    vectors = np.concatenate([p.vectors for p in preds])
    if n_clusters > len(vectors):
        raise ValueError(f"{n_clusters} clusters requested but only {len(vectors)} slot vectors")
    # canonical order so results do not depend on slot order within images
    order = np.lexsort(vectors.T[::-1])
    assign_sorted, _, _ = kmeans(vectors[order], n_clusters, restarts, seed)
    assign = np.empty_like(assign_sorted)
    assign[order] = assign_sorted

    cluster_maps = []
    offset = 0
    for p in preds:
        lut = np.full(max(int(p.slot_labels.max()), int(p.slot_ids.max(initial=0))) + 1, -1)
        lut[p.slot_ids] = assign[offset:offset + len(p.slot_ids)]
        offset += len(p.slot_ids)
        cluster_maps.append(lut[p.slot_labels])

    inter = np.zeros((n_clusters, n_classes))
    c_area = np.zeros(n_clusters)
    g_area = np.zeros(n_classes)
    for cmap, gmap in zip(cluster_maps, class_maps):
        valid = cmap >= 0
        np.add.at(inter, (cmap[valid], gmap[valid]), 1)
        c_area += np.bincount(cmap[valid], minlength=n_clusters)
        g_area += np.bincount(gmap.ravel(), minlength=n_classes)
    union = c_area[:, None] + g_area[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    pairs, _ = hungarian_match(iou)
    cluster_to_class = np.zeros(n_clusters + 1, dtype=np.int64)  # last entry: unpooled slots
    for c, cls in pairs:
        cluster_to_class[c] = cls

    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for cmap, gmap in zip(cluster_maps, class_maps):
        pred_cls = cluster_to_class[cmap]
        np.add.at(conf, (gmap.ravel(), pred_cls.ravel()), 1)
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(0) + conf.sum(1) - tp
    present = denom > 0
    miou = float((tp[present] / denom[present]).mean())
    pacc = float(tp.sum() / conf.sum())
    return miou, pacc


def semantic_segmentation_eval(predictions: Sequence[SlotPrediction] | Callable[[int], Sequence[SlotPrediction]],
                               class_maps: Sequence[np.ndarray], n_clusters: int, n_classes: int,
                               restarts: int = 20, repeats: int = 3, seed: int = 0) -> MetricsReport:
    """Cluster pooled slot vectors dataset-wide and score the induced class maps.

    Clusters are matched to classes by Hungarian matching on total IoU;
    unmatched clusters count as background (class 0). ``predictions`` may be
    a callable taking the repeat index, so that inference is redone with
    fresh slot noise per repeat.
    """
    mious, paccs = [], []
    for r in range(repeats):
        preds = predictions(r) if callable(predictions) else predictions
        miou, pacc = _segmentation_once(preds, class_maps, n_clusters, n_classes, restarts, [seed, r])
        mious.append(miou)
        paccs.append(pacc)
    return MetricsReport(
        task="segmentation",
        metrics={"mIoU": float(np.mean(mious)), "pAcc": float(np.mean(paccs))},
        settings={"clusters": n_clusters, "restarts": restarts, "repeats": repeats, "seed": seed},
        per_image={"mIoU_runs": mious, "pAcc_runs": paccs},
    )
