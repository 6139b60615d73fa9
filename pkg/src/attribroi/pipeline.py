"""Cohort-level glue: explain a set of images with each method, turn the maps
into per-subject ROI tables, and intersect the cohort top lists."""

from __future__ import annotations

import numpy as np

from .atlas import METHODS, RoiAtlas, aggregate_roi, cohort_top_rois, consensus
from .exceptions import ConfigError
from .explain import AttributionMap, ShapleyConfig, grad_cam_maps, saliency_maps, shap_values

BATCH = 64


def explain_cohort(model, images, atlas: RoiAtlas, method, baseline=None, target_class=None,
                   shapley: ShapleyConfig | None = None, subject_ids=None):
    """Return ``(maps, tables)`` for every image, one AttributionMap and one
    RoiScoreTable each."""
    images = np.asarray(images, dtype=np.float64)
    if subject_ids is None:
        subject_ids = [f"sub-{i:04d}" for i in range(len(images))]
    maps, tables = [], []
    if method in ("saliency", "gradcam"):
        engine = saliency_maps if method == "saliency" else grad_cam_maps
        for start in range(0, len(images), BATCH):
            grids, targets = engine(model, images[start:start + BATCH], target_class)
            for grid, t in zip(grids, targets):
                norm = "max" if method == "gradcam" else "none"
                maps.append(AttributionMap(values=grid, signed=False, method=method,
                                           target_class=int(t), normalization=norm))
    elif method == "shap":
        shapley = shapley or ShapleyConfig()
        for img in images:
            res = shap_values(model, img, atlas, shapley, baseline_image=baseline,
                              target_class=target_class)
            maps.append(res.map)
    else:
        raise ConfigError(f"unknown method {method!r}; choose from {list(METHODS)}")
    for amap, sid in zip(maps, subject_ids):
        tables.append(aggregate_roi(amap, atlas, method=method, subject=sid))
    return maps, tables


def cohort_consensus(tables_by_method, atlas: RoiAtlas, k=5, min_fraction=0.0):
    """Cohort top-``k`` per method, then their pairwise and three-way overlaps."""
    missing = [m for m in METHODS if m not in tables_by_method]
    if missing:
        raise ConfigError(f"consensus needs tables for every method; missing {missing}")
    summaries = {m: cohort_top_rois(tables_by_method[m], k, min_fraction) for m in METHODS}
    report = consensus(*(summaries[m].top for m in METHODS), atlas,
                       frequencies={m: s.frequencies for m, s in summaries.items()})
    return report, summaries
