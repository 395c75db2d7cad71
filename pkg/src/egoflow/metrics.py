"""Scene-flow, ego-motion and segmentation metrics."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def _relative_error(err: np.ndarray, gt_norm: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = err / gt_norm
    rel = np.where(gt_norm > 0, rel, np.where(err > 0, np.inf, 0.0))
    return rel


def flow_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"flow_metrics: prediction {pred.shape} vs ground truth {gt.shape}")
    if len(gt) == 0:
        return {"EPE3D": float("nan"), "Acc3DS": float("nan"), "Acc3DR": float("nan"),
                "Out3D": float("nan"), "n": 0}
    err = np.linalg.norm(pred - gt, axis=1)
    rel = _relative_error(err, np.linalg.norm(gt, axis=1))
    return {
        "EPE3D": float(err.mean()),
        "Acc3DS": float(((err < 0.05) | (rel < 0.05)).mean()),
        "Acc3DR": float(((err < 0.1) | (rel < 0.1)).mean()),
        "Out3D": float(((err > 0.3) | (rel > 0.1)).mean()),
        "n": int(len(gt)),
    }


def rotation_angle_deg(R_pred: np.ndarray, R_gt: np.ndarray) -> float:
    """Angle of R_pred^T R_gt in degrees.

    Equal to arccos((tr - 1) / 2) for exact rotations; the atan2 form keeps
    float32-rounded matrices from reading as a few thousandths of a degree
    apart when they are identical.
    """
    M = np.asarray(R_pred, dtype=np.float64).T @ np.asarray(R_gt, dtype=np.float64)
    c = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def ego_metrics(R_pred, t_pred, R_gt, t_gt) -> dict:
    return {
        "RAE": rotation_angle_deg(R_pred, R_gt),
        "RTE": float(np.linalg.norm(np.asarray(t_pred, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64))),
    }


def mask_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    """Per-class precision/recall. An empty denominator yields 1.0 and sets a flag."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    out: dict = {"empty": []}
    for cls, p, g in (("FG", pred, gt), ("BG", ~pred, ~gt)):
        tp = int((p & g).sum())
        npred, ngt = int(p.sum()), int(g.sum())
        for key, den in ((f"prec_{cls}", npred), (f"rec_{cls}", ngt)):
            if den == 0:
                out[key] = 1.0
                out["empty"].append(key)
            else:
                out[key] = tp / den
    return out


class FlowAccumulator:
    """Pools per-point errors across scenes (and keeps per-scene values)."""

    def __init__(self):
        self.pred: list[np.ndarray] = []
        self.gt: list[np.ndarray] = []

    def add(self, pred, gt) -> dict:
        self.pred.append(np.asarray(pred, dtype=np.float64))
        self.gt.append(np.asarray(gt, dtype=np.float64))
        return flow_metrics(self.pred[-1], self.gt[-1])

    def pooled(self) -> dict:
        if not self.pred:
            return flow_metrics(np.zeros((0, 3)), np.zeros((0, 3)))
        return flow_metrics(np.concatenate(self.pred), np.concatenate(self.gt))

    def per_scene_mean(self) -> dict:
        rows = [flow_metrics(p, g) for p, g in zip(self.pred, self.gt)]
        return {k: float(np.mean([r[k] for r in rows])) for k in ("EPE3D", "Acc3DS", "Acc3DR", "Out3D")}


def write_report(path, rows: list[dict], aggregate: dict) -> None:
    """CSV with one row per scene plus a final ``aggregate`` row."""
    keys: list[str] = []
    for r in rows + [aggregate]:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(Path(path), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)
        w.writerow(aggregate)
