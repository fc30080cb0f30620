"""Segmentation quality metrics and evaluation reports.

Dice is the usual overlap ratio per class. HD95 is the 95th percentile of
symmetric boundary-to-boundary distances in voxel units, computed exhaustively
(desk-scale volumes are small enough for the quadratic pairwise pass).
Classes absent from both volumes get NaN Dice; classes absent from either
volume get NaN HD95. Aggregates skip NaN entries.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .models import NetworkState, forward_with_taps
from .volumes import jsonable_float


def dice_scores(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class Dice overlap; NaN where a class is absent from both."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} vs truth {truth.shape}")
    out = np.full(num_classes, np.nan)
    for k in range(num_classes):
        p = pred == k
        g = truth == k
        denom = int(p.sum()) + int(g.sum())
        if denom == 0:
            continue
        out[k] = 2.0 * int((p & g).sum()) / denom
    return out


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of `mask` with a missing 6-neighbor; volume edges count."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[2:, 1:-1, 1:-1] & padded[:-2, 1:-1, 1:-1]
        & padded[1:-1, 2:, 1:-1] & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 1:-1, 2:] & padded[1:-1, 1:-1, :-2]
    )
    return mask & ~interior


def hd95(pred_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """95th percentile of symmetric surface distances; NaN when either is empty."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    truth_mask = np.asarray(truth_mask, dtype=bool)
    if pred_mask.shape != truth_mask.shape:
        raise ShapeMismatchError(f"prediction {pred_mask.shape} vs truth {truth_mask.shape}")
    if not pred_mask.any() or not truth_mask.any():
        return float("nan")
    a = np.argwhere(boundary_mask(pred_mask)).astype(np.float64)
    b = np.argwhere(boundary_mask(truth_mask)).astype(np.float64)
    cross = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    pooled = np.concatenate([cross.min(axis=1), cross.min(axis=0)])
    return float(np.percentile(pooled, 95))


@dataclass
class EvalReport:
    """Per-case and aggregate segmentation scores.

    dice and hd95 rows are [num_classes] arrays per case, NaN-padded per the
    sentinel rules. mdice averages the per-class mean Dice over foreground
    classes only.
    """

    case_ids: list
    dice: np.ndarray  # [cases, classes]
    hd95: np.ndarray  # [cases, classes]
    seconds: np.ndarray  # [cases]

    @property
    def dice_mean(self) -> np.ndarray:
        return _nanmean_cols(self.dice)

    @property
    def hd95_mean(self) -> np.ndarray:
        return _nanmean_cols(self.hd95)

    @property
    def mdice(self) -> float:
        fg = self.dice_mean[1:]
        keep = ~np.isnan(fg)
        return float(fg[keep].mean()) if keep.any() else float("nan")

    def to_csv(self) -> str:
        lines = ["case,class_id,dice,hd95,seconds"]
        rows = list(zip(self.case_ids, self.dice, self.hd95, self.seconds))
        rows.append(("mean", self.dice_mean, self.hd95_mean, float(self.seconds.mean())))
        for case, dice_row, hd_row, secs in rows:
            for k in range(dice_row.shape[0]):
                lines.append(
                    f"{case},{k},{_csv_num(dice_row[k])},{_csv_num(hd_row[k])},{_csv_num(secs)}"
                )
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "cases": [
                {
                    "case": case,
                    "dice": [jsonable_float(v) for v in self.dice[i]],
                    "hd95": [jsonable_float(v) for v in self.hd95[i]],
                    "seconds": float(self.seconds[i]),
                }
                for i, case in enumerate(self.case_ids)
            ],
            "dice_mean": [jsonable_float(v) for v in self.dice_mean],
            "hd95_mean": [jsonable_float(v) for v in self.hd95_mean],
            "mdice": jsonable_float(self.mdice),
            "seconds_mean": float(self.seconds.mean()),
        }


def _nanmean_cols(matrix: np.ndarray) -> np.ndarray:
    out = np.full(matrix.shape[1], np.nan)
    for k in range(matrix.shape[1]):
        col = matrix[:, k]
        keep = ~np.isnan(col)
        if keep.any():
            out[k] = col[keep].mean()
    return out


def _csv_num(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.10g}"


def predict_segmentation(state: NetworkState, image) -> np.ndarray:
    """Argmax class map from a single [M, D, H, W] image, gradient-free."""
    x = np.asarray(image.data if hasattr(image, "data") else image, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeMismatchError(f"image must be [M, D, H, W], got {x.shape}")
    saved = [(p, p.requires_grad) for _, p in state.parameters()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        logits, _ = forward_with_taps(state, x[None])
    finally:
        for p, flag in saved:
            p.requires_grad = flag
    return np.argmax(logits.data[0], axis=0)


def evaluate(state: NetworkState, cases, with_hd95: bool = True) -> EvalReport:
    """Score a network on (image, labels) pairs.

    cases is an iterable of (ImageVolume, LabelVolume) with exclusive labels.
    with_hd95=False skips the surface-distance pass (validation-loop speed).
    """
    case_ids, dice_rows, hd_rows, secs = [], [], [], []
    for i, (image, labels) in enumerate(cases):
        start = time.perf_counter()
        seg = predict_segmentation(state, image)
        elapsed = time.perf_counter() - start
        k = labels.num_classes
        dice_rows.append(dice_scores(seg, labels.data, k))
        if with_hd95:
            hd_rows.append(
                np.array([hd95(seg == c, labels.data == c) for c in range(k)])
            )
        else:
            hd_rows.append(np.full(k, np.nan))
        case_ids.append(i)
        secs.append(elapsed)
    return EvalReport(
        case_ids=case_ids,
        dice=np.array(dice_rows),
        hd95=np.array(hd_rows),
        seconds=np.array(secs),
    )
