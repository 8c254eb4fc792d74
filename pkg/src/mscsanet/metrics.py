"""Segmentation metrics: voxel Dice, 26-connected components, lesion-wise F1.

Lesion-wise F1 uses any-overlap matching between predicted and ground-truth
components: a ground-truth component touched by at least one predicted voxel
of any predicted component counts as a true positive. Both-empty mask pairs
score 1.0 by convention for Dice and F1.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError

SMALL_LESION_THRESHOLD = 1000

# offsets of the full 3x3x3 neighborhood minus the center
NEIGHBORS_26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


def dice_score(pred, gt):
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise DimensionError(f"mask extents differ: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def connected_components(mask):
    """Label maximal 26-connected foreground sets in scan order.

    Returns (labels, count) where labels is an int32 array with 0 background
    and components numbered 1..count by the position of their first voxel.
    """
    m = np.asarray(mask).astype(bool)
    labels = np.zeros(m.shape, dtype=np.int32)
    count = 0
    H, W, D = m.shape
    for idx in np.argwhere(m):
        x, y, z = (int(v) for v in idx)
        if labels[x, y, z]:
            continue
        count += 1
        stack = [(x, y, z)]
        labels[x, y, z] = count
        while stack:
            cx, cy, cz = stack.pop()
            for dx, dy, dz in NEIGHBORS_26:
                nx, ny, nz = cx + dx, cy + dy, cz + dz
                if (
                    0 <= nx < H
                    and 0 <= ny < W
                    and 0 <= nz < D
                    and m[nx, ny, nz]
                    and not labels[nx, ny, nz]
                ):
                    labels[nx, ny, nz] = count
                    stack.append((nx, ny, nz))
    return labels, count


def lesion_f1(pred, gt):
    """Component-level detection counts and F1 with any-overlap matching."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise DimensionError(f"mask extents differ: {p.shape} vs {g.shape}")
    gt_labels, n_gt = connected_components(g)
    pred_labels, n_pred = connected_components(p)
    overlap = p & g
    matched_gt = set(np.unique(gt_labels[overlap])) - {0}
    matched_pred = set(np.unique(pred_labels[overlap])) - {0}
    tp = len(matched_gt)
    fn = n_gt - tp
    fp = n_pred - len(matched_pred)
    denom = 2 * tp + fp + fn
    f1 = 1.0 if denom == 0 else 2.0 * tp / denom
    return tp, fp, fn, f1


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # per-case dicts
    threshold: int = SMALL_LESION_THRESHOLD

    def add_case(self, case_id, lesion_volume, pred, gt):
        tp, fp, fn, f1 = lesion_f1(pred, gt)
        self.rows.append(
            {
                "id": case_id,
                "lesion_volume": int(lesion_volume),
                "dice": dice_score(pred, gt),
                "tp": tp,
                "fp": fp,
                "fn": fn,
                "f1": f1,
            }
        )

    @staticmethod
    def _aggregate(rows):
        if not rows:
            return {"n": 0, "mean_dice": float("nan"), "pooled_f1": float("nan")}
        tp = sum(r["tp"] for r in rows)
        fp = sum(r["fp"] for r in rows)
        fn = sum(r["fn"] for r in rows)
        denom = 2 * tp + fp + fn
        return {
            "n": len(rows),
            "mean_dice": sum(r["dice"] for r in rows) / len(rows),
            "pooled_f1": 1.0 if denom == 0 else 2.0 * tp / denom,
        }

    def summary(self):
        small = [r for r in self.rows if r["lesion_volume"] < self.threshold]
        return {
            "entire": self._aggregate(self.rows),
            "small_lesion": self._aggregate(small),
        }

    def write_csvs(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        per_case = os.path.join(out_dir, "metrics.csv")
        with open(per_case, "w", newline="") as f:
            writer = csv.DictWriter(
                f, fieldnames=["id", "lesion_volume", "dice", "tp", "fp", "fn", "f1"]
            )
            writer.writeheader()
            writer.writerows(self.rows)
        with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["subset", "n", "mean_dice", "pooled_f1"])
            for name, agg in self.summary().items():
                writer.writerow([name, agg["n"], agg["mean_dice"], agg["pooled_f1"]])
        with open(os.path.join(out_dir, "dice_vs_volume.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["lesion_volume", "dice"])
            for r in self.rows:
                writer.writerow([r["lesion_volume"], r["dice"]])
