"""Task pipelines: model inference, mask post-processing and metric aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import SceneSample
from .errors import ConfigError
from .masks import (
    available_sources,
    block_pattern,
    boxes_from_masks,
    extract_masks,
    hard_masks,
    resize_masks,
)
from .metrics import (
    MetricsReport,
    SlotPrediction,
    adjusted_rand_index,
    corloc_and_detection_rate,
    mbo_class,
    mbo_instance,
    pool_slot_features,
    semantic_segmentation_eval,
)
from .training import TrainState, TrainingData, load_training_data

TASKS = ("discovery", "localization", "segmentation")


@dataclass
class Inference:
    """Per-image soft masks at image resolution plus their hard labels."""

    soft: np.ndarray  # S x K x H x W
    labels: np.ndarray  # S x H x W
    grid_masks: np.ndarray  # S x K x rows x cols (slot masks before resizing)


def run_inference(state: TrainState, arrays: TrainingData, source: str, seed: int = 0,
                  n_slots: int | None = None, batch_size: int = 64) -> Inference:
    """Forward every sample once with seeded slot noise and post-process the chosen masks."""
    if source not in available_sources(state.cfg.decoder):
        raise ConfigError(
            f"mask source {source!r} is unavailable for the {state.cfg.decoder} decoder; "
            f"valid: {', '.join(available_sources(state.cfg.decoder))}"
        )
    model = state.model
    model.eval()
    dtype = next(model.parameters()).dtype
    h, w = state.spec.image_size
    generator = torch.Generator().manual_seed(seed)
    soft, grid_masks = [], []
    with torch.no_grad():
        for start in range(0, len(arrays.features), batch_size):
            sl = slice(start, start + batch_size)
            feats = torch.as_tensor(arrays.features[sl], dtype=dtype)
            targets = torch.as_tensor(arrays.targets[sl], dtype=dtype)
            images = None if arrays.images is None else torch.as_tensor(arrays.images[sl], dtype=dtype)
            _, out = model(feats, targets, generator, images, n_slots)
            masks = extract_masks(out, source)
            grid_masks.append(masks)
            soft.append(resize_masks(masks, h, w))
    soft_all = np.concatenate(soft)
    return Inference(soft_all, hard_masks(soft_all), np.concatenate(grid_masks))


def discovery_metrics(labels, samples: list[SceneSample]) -> tuple[dict, dict, dict]:
    aris, mbo_i, mbo_c = [], [], []
    for pred, sample in zip(labels, samples, strict=True):
        aris.append(adjusted_rand_index(pred, sample.instances, foreground_only=True))
        if sample.instances.max() > 0:
            mbo_i.append(mbo_instance(pred, sample.instances))
            mbo_c.append(mbo_class(pred, sample.class_map()))
        else:
            mbo_i.append(float("nan"))
            mbo_c.append(float("nan"))
    aris_arr = np.array(aris)
    excluded = int(np.isnan(aris_arr).sum())
    metrics = {
        "FG-ARI": _nanmean(aris),
        "mBO_i": _nanmean(mbo_i),
        "mBO_c": _nanmean(mbo_c),
    }
    per_image = {"ids": [s.sample_id for s in samples], "FG-ARI": aris, "mBO_i": mbo_i, "mBO_c": mbo_c}
    return metrics, per_image, {"no_foreground": excluded}


def localization_metrics(labels, samples: list[SceneSample], threshold: float = 0.5):
    pred_boxes = [[box for _, box in boxes_from_masks(pred)] for pred in labels]
    gt_boxes = [[box for inst, box in boxes_from_masks(s.instances) if inst != 0] for s in samples]
    corloc, det = corloc_and_detection_rate(pred_boxes, gt_boxes, threshold)
    excluded = sum(1 for g in gt_boxes if not g)
    return {"CorLoc": corloc, "DetRate": det}, {"ids": [s.sample_id for s in samples]}, {"no_gt_boxes": excluded}


def _nanmean(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    if np.all(np.isnan(arr)):
        return float("nan")
    return float(np.nanmean(arr))


def evaluate(state: TrainState, dataset, task: str, source: str | None = None, seed: int = 0,
             threshold: float = 0.5, n_clusters: int | None = None, restarts: int = 20,
             repeats: int = 3, n_slots: int | None = None) -> MetricsReport:
    """Run one task protocol on a dataset split and return its report."""
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    from .masks import default_mask_source

    source = source or default_mask_source(state.cfg.decoder)
    _, arrays = load_training_data(state.cfg, dataset)
    samples = list(dataset)
    settings = {"mask_source": source, "n_slots": n_slots or state.cfg.n_slots, "seed": seed,
                "decoder": state.cfg.decoder, "step": state.step, "split": dataset.split}
    if task == "segmentation":
        n_classes = len(dataset.manifest.classes)
        n_clusters = n_clusters or n_classes
        class_maps = [s.class_map() for s in samples]

        def predictions(repeat: int):
            inf = run_inference(state, arrays, source, seed + repeat, n_slots)
            return slot_predictions(inf, arrays.stored)

        report = semantic_segmentation_eval(predictions, class_maps, n_clusters, n_classes,
                                            restarts, repeats, seed)
        report.settings.update(settings)
        return report

    inf = run_inference(state, arrays, source, seed, n_slots)
    if task == "discovery":
        metrics, per_image, excluded = discovery_metrics(inf.labels, samples)
    else:
        metrics, per_image, excluded = localization_metrics(inf.labels, samples, threshold)
        settings["threshold"] = threshold
    return MetricsReport(task, metrics, settings, per_image, excluded)


def slot_predictions(inf: Inference, features: np.ndarray) -> list[SlotPrediction]:
    """Pool target features under each slot's grid mask for clustering."""
    preds = []
    for labels, masks, feats in zip(inf.labels, inf.grid_masks, features):
        if masks.shape[-2] * masks.shape[-1] != feats.shape[0]:
            rows = cols = int(round(np.sqrt(feats.shape[0])))
            masks = resize_masks(masks, rows, cols)
        vectors, keep = pool_slot_features(masks, feats)
        preds.append(SlotPrediction(labels, vectors, keep))
    return preds


def evaluate_block_pattern(dataset, task: str, num_masks: int, threshold: float = 0.5,
                           n_clusters: int | None = None, restarts: int = 20, repeats: int = 3,
                           seed: int = 0) -> MetricsReport:
    """Score the model-free block partition under a task protocol."""
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    samples = list(dataset)
    h, w = dataset.manifest.image_size
    blocks = block_pattern(num_masks, h, w)
    labels = [blocks] * len(samples)
    settings = {"baseline": "block-pattern", "num_masks": num_masks, "split": dataset.split}
    if task == "discovery":
        metrics, per_image, excluded = discovery_metrics(labels, samples)
    elif task == "localization":
        metrics, per_image, excluded = localization_metrics(labels, samples, threshold)
        settings["threshold"] = threshold
    else:
        n_classes = len(dataset.manifest.classes)
        onehot = (blocks[None] == np.arange(num_masks)[:, None, None]).astype(np.float64)
        rows, cols = dataset.manifest.grid
        grid_masks = resize_masks(onehot, rows, cols)
        preds = []
        for s in samples:
            vectors, keep = pool_slot_features(grid_masks, s.features.tokens)
            preds.append(SlotPrediction(blocks, vectors, keep))
        report = semantic_segmentation_eval(preds, [s.class_map() for s in samples],
                                            n_clusters or n_classes, n_classes, restarts, repeats, seed)
        report.task = "segmentation"
        report.settings.update(settings)
        return report
    return MetricsReport(task, metrics, settings, per_image, excluded)
