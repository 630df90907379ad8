"""Segmentation quality metrics: Dice overlap, 95th-percentile boundary
distance, and multi-seed aggregation.

A boundary voxel of class c is a c-voxel with at least one face-adjacent
non-c neighbor; voxels outside the array count as non-c. HD95 is the linear-
interpolation 95th percentile of the concatenation of both directed
boundary-to-boundary distance sets, in physical units. Empty regions make
HD95 undefined (None); undefined entries are excluded from means.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from .core import LabelMask
from .errors import DataError


@dataclass
class MetricReport:
    """Per-class scores for one prediction/ground-truth pair."""

    per_class_dsc: list[float]
    per_class_hd95: list[float | None]
    case_id: str = ""

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.per_class_dsc))

    @property
    def mean_hd95(self) -> float | None:
        defined = [h for h in self.per_class_hd95 if h is not None]
        return float(np.mean(defined)) if defined else None

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "per_class_dsc": self.per_class_dsc,
            "per_class_hd95": self.per_class_hd95,
            "mean_dsc": self.mean_dsc,
            "mean_hd95": self.mean_hd95,
        }


def _check_shapes(pred: LabelMask, gt: LabelMask) -> None:
    if pred.shape != gt.shape:
        raise DataError(f"prediction shape {pred.shape} != ground truth {gt.shape}")


def dice_score(pred: LabelMask, gt: LabelMask, c: int) -> float:
    """2|A∩B| / (|A|+|B|) for class c; 1.0 when both regions are empty."""
    _check_shapes(pred, gt)
    a = pred.data == c
    b = gt.data == c
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def boundary_voxels(region: np.ndarray) -> np.ndarray:
    """Face-connectivity boundary of a binary region; image edges count as
    outside."""
    region = np.asarray(region, dtype=bool)
    structure = generate_binary_structure(region.ndim, 1)
    interior = binary_erosion(region, structure=structure, border_value=0)
    return region & ~interior


def hd95(
    pred: LabelMask,
    gt: LabelMask,
    c: int,
    spacing: Sequence[float],
) -> float | None:
    """Symmetric 95th-percentile boundary distance in mm, or None if either
    class region is empty."""
    _check_shapes(pred, gt)
    a = pred.data == c
    b = gt.data == c
    if not a.any() or not b.any():
        return None
    scale = np.asarray(spacing, dtype=np.float64)
    pts_a = np.argwhere(boundary_voxels(a)) * scale
    pts_b = np.argwhere(boundary_voxels(b)) * scale
    d_ab = cKDTree(pts_b).query(pts_a)[0]
    d_ba = cKDTree(pts_a).query(pts_b)[0]
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95, method="linear"))


def evaluate_masks(
    pred: LabelMask,
    gt: LabelMask,
    spacing: Sequence[float],
    case_id: str = "",
) -> MetricReport:
    """Per-class DSC and HD95 over foreground classes 1..C."""
    _check_shapes(pred, gt)
    num_classes = max(pred.num_classes, gt.num_classes)
    return MetricReport(
        per_class_dsc=[dice_score(pred, gt, c) for c in range(1, num_classes + 1)],
        per_class_hd95=[hd95(pred, gt, c, spacing) for c in range(1, num_classes + 1)],
        case_id=case_id,
    )


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Sample mean and n-1 std; std is 0.0 for a single value."""
    if len(values) == 0:
        raise DataError("cannot aggregate an empty value list")
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, std


def aggregate_runs(per_seed_metrics: Sequence[dict[str, float | None]]) -> dict:
    """Aggregate per-seed scalar metrics into mean/std pairs.

    Input dicts map metric name to a scalar or None; None entries are
    excluded per metric. Raises on an empty input list.
    """
    if not per_seed_metrics:
        raise DataError("cannot aggregate zero runs")
    names: list[str] = sorted({k for m in per_seed_metrics for k in m})
    out: dict[str, dict[str, float | None]] = {}
    for name in names:
        defined = [m[name] for m in per_seed_metrics if m.get(name) is not None]
        if defined:
            mean, std = mean_std([float(v) for v in defined])
            out[name] = {"mean": mean, "std": std, "n": len(defined)}
        else:
            out[name] = {"mean": None, "std": None, "n": 0}
    return out


def write_metrics_json(
    path: str | Path,
    reports: Sequence[MetricReport],
    seeds: Sequence[int],
    extra: dict | None = None,
) -> dict:
    """Emit the per-case / aggregate metrics payload for one evaluation."""
    if not reports:
        raise DataError("no reports to write")
    mean_dscs = [r.mean_dsc for r in reports]
    mean_hds = [r.mean_hd95 for r in reports if r.mean_hd95 is not None]
    payload = {
        "seeds": list(seeds),
        "cases": [r.to_dict() for r in reports],
        "aggregate": {
            "mean_dsc": float(np.mean(mean_dscs)),
            "std_dsc": float(np.std(mean_dscs, ddof=1)) if len(mean_dscs) > 1 else 0.0,
            "mean_hd95": float(np.mean(mean_hds)) if mean_hds else None,
            "std_hd95": (
                float(np.std(mean_hds, ddof=1)) if len(mean_hds) > 1 else 0.0
            )
            if mean_hds
            else None,
            "num_cases": len(reports),
        },
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2))
    return payload
