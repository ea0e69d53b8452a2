"""Sliding-window inference, anatomical postprocessing, and hierarchical metrics.

Predictions are scored against every annotation group on three nested
classes (kidney and masses, masses, tumor) with volumetric Dice and a
tolerance-based surface Dice, then averaged over groups.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .cohort import LabelMap
from .unet3d import UNet3D

HIERARCHY: tuple[tuple[str, frozenset[int]], ...] = (
    ("kidney_and_masses", frozenset({1, 2, 3})),
    ("masses", frozenset({2, 3})),
    ("tumor", frozenset({2})),
)

CLASS_NAMES = tuple(name for name, _ in HIERARCHY)


def class_mask(labels: np.ndarray, class_name: str) -> np.ndarray:
    label_set = dict(HIERARCHY)[class_name]
    return np.isin(labels, list(label_set))


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Volumetric overlap 2|A∩B|/(|A|+|B|); two empty masks agree perfectly."""
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    a = pred_mask.astype(bool)
    b = gt_mask.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Voxels of the mask with at least one face-adjacent outside voxel.

    Erosion uses border_value=0, so voxels touching the array edge count
    as boundary.
    """
    structure = ndimage.generate_binary_structure(3, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~interior


def surface_dice(
    pred_mask: np.ndarray,
    gt_mask: np.ndarray,
    spacing: tuple[float, float, float],
    tolerance: float,
) -> float:
    """Fraction of both boundaries lying within `tolerance` mm of the other.

    Distances are Euclidean in physical units via spacing-aware distance
    transforms. Both empty: 1.0; exactly one empty: 0.0.
    """
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    if tolerance < 0:
        raise ValueError("tolerance must be nonnegative")
    a = pred_mask.astype(bool)
    b = gt_mask.astype(bool)
    if not a.any() and not b.any():
        return 1.0
    if not a.any() or not b.any():
        return 0.0
    surf_a = _boundary(a)
    surf_b = _boundary(b)
    dist_to_a = ndimage.distance_transform_edt(~surf_a, sampling=spacing)
    dist_to_b = ndimage.distance_transform_edt(~surf_b, sampling=spacing)
    n_a = int(surf_a.sum())
    n_b = int(surf_b.sum())
    close_a = int((dist_to_b[surf_a] <= tolerance).sum())
    close_b = int((dist_to_a[surf_b] <= tolerance).sum())
    return (close_a + close_b) / (n_a + n_b)


def postprocess(prediction: LabelMap) -> LabelMap:
    """Keep the two largest 26-connected foreground components, erase the rest."""
    labels = prediction.voxels
    foreground = labels > 0
    structure = np.ones((3, 3, 3), dtype=bool)
    components, count = ndimage.label(foreground, structure=structure)
    if count <= 2:
        cleaned = labels.copy()
    else:
        sizes = ndimage.sum_labels(foreground, components, index=np.arange(1, count + 1))
        keep = np.argsort(sizes)[-2:] + 1
        cleaned = np.where(np.isin(components, keep), labels, 0).astype(labels.dtype)
    return LabelMap(
        voxels=cleaned,
        spacing=prediction.spacing,
        case_id=prediction.case_id,
        annotation_group=prediction.annotation_group,
    )


def _window_starts(extent: int, window: int) -> list[int]:
    stride = window // 2
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def _gaussian_importance(window: tuple[int, int, int]) -> np.ndarray:
    axes = []
    for w in window:
        x = np.arange(w) - (w - 1) / 2.0
        sigma = w / 8.0
        axes.append(np.exp(-0.5 * (x / sigma) ** 2))
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def sliding_window_predict(
    model: UNet3D,
    volume: np.ndarray,
    window: tuple[int, int, int] = (96, 160, 160),
) -> np.ndarray:
    """Tile the volume with half-overlapping windows and fuse probabilities.

    Volumes smaller than the window are padded symmetrically with their
    minimum intensity and the result cropped back. Overlapping windows are
    blended with a Gaussian center weight before the argmax.
    """
    original_shape = volume.shape
    pad = [(max(0, w - d) // 2, max(0, w - d) - max(0, w - d) // 2) for d, w in zip(volume.shape, window)]
    if any(p != (0, 0) for p in pad):
        volume = np.pad(volume, pad, mode="constant", constant_values=float(volume.min()))

    num_classes = model.config.num_classes
    accumulated = np.zeros((num_classes, *volume.shape), dtype=np.float64)
    weight_sum = np.zeros(volume.shape, dtype=np.float64)
    importance = _gaussian_importance(window)

    starts = [_window_starts(d, w) for d, w in zip(volume.shape, window)]
    model.eval()
    with torch.no_grad():
        for z0 in starts[0]:
            for y0 in starts[1]:
                for x0 in starts[2]:
                    region = (
                        slice(z0, z0 + window[0]),
                        slice(y0, y0 + window[1]),
                        slice(x0, x0 + window[2]),
                    )
                    tile = torch.from_numpy(volume[region][None, None].astype(np.float32))
                    probs = torch.softmax(model(tile), dim=1)[0].numpy().astype(np.float64)
                    accumulated[(slice(None),) + region] += probs * importance
                    weight_sum[region] += importance

    fused = accumulated / weight_sum
    labels = np.argmax(fused, axis=0).astype(np.int16)
    crop = tuple(slice(p[0], p[0] + d) for p, d in zip(pad, original_shape))
    return labels[crop]


# ---------------------------------------------------------------------------
# Case evaluation and reporting
# ---------------------------------------------------------------------------


@dataclass
class EvalRow:
    case_id: str
    class_name: str
    dice: float
    surface_dice: float


def evaluate_case(
    prediction: LabelMap,
    annotations: list[LabelMap],
    tolerances: dict[str, float] | None = None,
) -> list[EvalRow]:
    """Score one prediction against all annotation groups, averaged per class."""
    if not annotations:
        raise ValueError(f"{prediction.case_id}: no annotation groups to evaluate against")
    for ann in annotations:
        if ann.shape != prediction.shape:
            raise ValueError(
                f"{prediction.case_id}: annotation shape {ann.shape} != prediction {prediction.shape}"
            )
    tolerances = tolerances or {}
    rows = []
    for class_name, _ in HIERARCHY:
        tol = tolerances.get(class_name, 1.0)
        pred_mask = class_mask(prediction.voxels, class_name)
        d_values, s_values = [], []
        for ann in annotations:
            gt_mask = class_mask(ann.voxels, class_name)
            d_values.append(dice(pred_mask, gt_mask))
            s_values.append(surface_dice(pred_mask, gt_mask, prediction.spacing, tol))
        rows.append(
            EvalRow(
                case_id=prediction.case_id,
                class_name=class_name,
                dice=float(np.mean(d_values)),
                surface_dice=float(np.mean(s_values)),
            )
        )
    return rows


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def extend(self, rows: list[EvalRow]) -> None:
        self.rows.extend(rows)

    def case_ids(self) -> list[str]:
        seen = dict.fromkeys(row.case_id for row in self.rows)
        return list(seen)

    def metric(self, case_id: str, class_name: str, metric: str = "dice") -> float:
        if metric not in ("dice", "surface_dice"):
            raise KeyError(f"unknown metric {metric!r}")
        for row in self.rows:
            if row.case_id == case_id and row.class_name == class_name:
                return getattr(row, metric)
        raise KeyError(f"no row for ({case_id}, {class_name})")

    def per_case(self, class_name: str, metric: str = "dice") -> dict[str, float]:
        return {
            row.case_id: getattr(row, metric)
            for row in self.rows
            if row.class_name == class_name
        }

    def tumor_dice(self) -> dict[str, float]:
        return self.per_case("tumor", "dice")

    def summary(self) -> dict:
        out: dict[str, dict] = {}
        for class_name in CLASS_NAMES:
            for metric in ("dice", "surface_dice"):
                values = np.array(
                    [getattr(r, metric) for r in self.rows if r.class_name == class_name]
                )
                if values.size == 0:
                    continue
                out[f"{class_name}.{metric}"] = {
                    "n": int(values.size),
                    "mean": float(values.mean()),
                    "sd": float(values.std(ddof=1)) if values.size > 1 else 0.0,
                    "median": float(np.median(values)),
                    "p25": float(np.percentile(values, 25)),
                    "p75": float(np.percentile(values, 75)),
                }
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case_id", "class", "dice", "surface_dice"])
            for row in self.rows:
                writer.writerow(
                    [row.case_id, row.class_name, f"{row.dice:.6f}", f"{row.surface_dice:.6f}"]
                )

    def write_summary_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))

    @classmethod
    def read_csv(cls, path: str | Path) -> "EvalReport":
        report = cls()
        with open(path, newline="") as fh:
            for record in csv.DictReader(fh):
                report.rows.append(
                    EvalRow(
                        case_id=record["case_id"],
                        class_name=record["class"],
                        dice=float(record["dice"]),
                        surface_dice=float(record["surface_dice"]),
                    )
                )
        return report
