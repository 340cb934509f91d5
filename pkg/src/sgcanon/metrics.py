"""Layout accuracy: IoU, mean IoU and recall at IoU thresholds."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .sg_core import Layout


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes; degenerate -> 0."""
    return float(pairwise_iou(np.asarray(box_a, float)[None], np.asarray(box_b, float)[None])[0])


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-aligned IoU of two (n, 4) arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    valid = (area_a > 0) & (area_b > 0) & (union > 0)
    return np.where(valid, inter / np.where(valid, union, 1.0), 0.0)


@dataclass
class EvalResult:
    miou: float
    r03: float
    r05: float
    num_objects: int
    per_scene: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"miou": self.miou, "r03": self.r03, "r05": self.r05, "num_objects": self.num_objects}


def _boxes(x) -> np.ndarray:
    return x.boxes if isinstance(x, Layout) else np.asarray(x, dtype=np.float64).reshape(-1, 4)


def evaluate(pred: Sequence, gt: Sequence) -> EvalResult:
    """Global per-object averages.  R@t counts IoU strictly greater than t."""
    if len(pred) != len(gt):
        raise ShapeError(f"{len(pred)} predicted layouts for {len(gt)} ground-truth layouts")
    scores, per_scene = [], []
    for k, (p, g) in enumerate(zip(pred, gt)):
        pb, gb = _boxes(p), _boxes(g)
        if pb.shape != gb.shape:
            raise ShapeError(f"scene {k}: {pb.shape[0]} predicted boxes vs {gb.shape[0]}")
        s = pairwise_iou(pb, gb)
        scores.append(s)
        per_scene.append({
            "scene": k,
            "num_objects": int(s.size),
            "miou": float(s.mean()) if s.size else 0.0,
            "r03": float((s > 0.3).mean()) if s.size else 0.0,
            "r05": float((s > 0.5).mean()) if s.size else 0.0,
        })
    allv = np.concatenate(scores) if scores else np.zeros(0)
    if allv.size == 0:
        return EvalResult(0.0, 0.0, 0.0, 0, per_scene)
    return EvalResult(
        float(allv.mean()), float((allv > 0.3).mean()), float((allv > 0.5).mean()), int(allv.size), per_scene
    )
