"""Evaluation at desk scale: depth-map accuracy, projected-label
segmentation metrics and the far-support analysis of gradient flow."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import DimensionMismatch, EmptyOverlap
from .geometry import LabeledMesh
from .render import SemanticMaskSet, rasterize


@dataclass
class DepthReport:
    """Depth comparison between two meshes over a camera set.

    mae is pixel-weighted over all cameras; per_camera holds
    (mae, pixel_count, coverage) per camera with NaN mae when a camera has
    no overlapping pixels.
    """

    mae: float
    pixel_count: int
    coverage: float
    per_camera: list = field(default_factory=list)


@dataclass
class SegReport:
    confusion: np.ndarray
    accuracy: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f: float
    classes_present: np.ndarray
    pixel_count: int


def depth_mae(mesh_a: LabeledMesh, mesh_b: LabeledMesh, cameras) -> DepthReport:
    """Mean absolute depth difference over pixels where both meshes render.

    Raises EmptyOverlap when no pixel anywhere has both depths defined.
    """
    total_abs = 0.0
    total_count = 0
    total_pixels = 0
    per_camera = []
    for cam in cameras:
        da = rasterize(mesh_a, cam).depth
        db = rasterize(mesh_b, cam).depth
        both = np.isfinite(da) & np.isfinite(db)
        count = int(both.sum())
        npx = da.size
        coverage = count / npx
        if count:
            err = float(np.abs(da[both] - db[both]).sum())
            per_camera.append((err / count, count, coverage))
            total_abs += err
            total_count += count
        else:
            per_camera.append((float("nan"), 0, 0.0))
        total_pixels += npx
    if total_count == 0:
        raise EmptyOverlap("no pixel has both depths defined in any camera")
    return DepthReport(
        mae=total_abs / total_count,
        pixel_count=total_count,
        coverage=total_count / total_pixels,
        per_camera=per_camera,
    )


def segmentation_metrics(predicted_label_images, truth_label_images, label_count: int,
                         unlabeled: int = SemanticMaskSet.UNLABELED) -> SegReport:
    """Confusion-matrix metrics over pixels labeled in both prediction and truth.

    Macro averages run over the classes present in the truth; the macro
    F-score is the harmonic mean of macro precision and macro recall.
    """
    confusion = np.zeros((label_count, label_count), dtype=np.int64)
    for pred, truth in zip(predicted_label_images, truth_label_images):
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise DimensionMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
        ok = (pred != unlabeled) & (truth != unlabeled)
        if ok.any():
            idx = truth[ok].astype(np.int64) * label_count + pred[ok].astype(np.int64)
            confusion += np.bincount(idx, minlength=label_count * label_count).reshape(
                label_count, label_count
            )
    total = int(confusion.sum())
    diag = np.diag(confusion).astype(np.float64)
    row = confusion.sum(axis=1).astype(np.float64)  # truth counts
    col = confusion.sum(axis=0).astype(np.float64)  # prediction counts
    with np.errstate(divide="ignore", invalid="ignore"):
        recall = np.where(row > 0, diag / row, 0.0)
        precision = np.where(col > 0, diag / col, 0.0)
        f = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    present = np.flatnonzero(row > 0)
    macro_p = float(precision[present].mean()) if present.size else 0.0
    macro_r = float(recall[present].mean()) if present.size else 0.0
    macro_f = 2 * macro_p * macro_r / (macro_p + macro_r) if macro_p + macro_r > 0 else 0.0
    return SegReport(
        confusion=confusion,
        accuracy=float(diag.sum() / total) if total else 0.0,
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f=f,
        macro_precision=macro_p,
        macro_recall=macro_r,
        macro_f=macro_f,
        classes_present=present,
        pixel_count=total,
    )


def far_support_fraction(support_masks, boundary_masks, far_threshold: float) -> float:
    """Fraction of non-zero-contribution pixels farther than `far_threshold`
    (exact Euclidean distance transform) from the nearest true-boundary pixel.

    Pools pixels over all cameras; 0 by convention when there is no support.
    """
    far = 0
    total = 0
    for support, boundary in zip(support_masks, boundary_masks):
        support = np.asarray(support, dtype=bool)
        boundary = np.asarray(boundary, dtype=bool)
        if support.shape != boundary.shape:
            raise DimensionMismatch("support and boundary mask sizes differ")
        n = int(support.sum())
        if n == 0:
            continue
        if boundary.any():
            dist = distance_transform_edt(~boundary)
        else:
            dist = np.full(boundary.shape, np.inf)
        far += int((support & (dist > far_threshold)).sum())
        total += n
    return far / total if total else 0.0


def gradient_support_analysis(support_by_method: dict, boundary_masks,
                              far_threshold: float) -> dict:
    """Far-support fraction per method (see far_support_fraction)."""
    return {
        name: far_support_fraction(masks, boundary_masks, far_threshold)
        for name, masks in support_by_method.items()
    }
