"""Evaluation metrics: Jaccard index and F-score over binarized masks.

mJ is the mean per-frame IoU scaled by 100 (to match the usual AVSBench
reporting); mF is left in [0, 1]. Probability maps are binarized with
p >= threshold. Edge conventions are fixed here so every caller agrees:
an empty prediction against an empty ground truth scores IoU 1.0,
precision is 1.0 when the prediction is empty, recall is 1.0 when the
ground truth is empty, and the F-score is 0.0 when its denominator
vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .datamodel import MaskKind, MaskSet
from .errors import DimensionError

DEFAULT_THRESHOLD = 0.5
DEFAULT_BETA2 = 1.0


def binarize(prob: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    return np.asarray(prob, dtype=np.float64) >= threshold


def frame_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Jaccard index of two boolean masks; both empty counts as 1.0."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise DimensionError(f"pred shape {p.shape} != gt shape {g.shape}")
    inter = np.logical_and(p, g).sum()
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(inter) / float(union)


def frame_fscore(pred: np.ndarray, gt: np.ndarray, beta2: float = DEFAULT_BETA2) -> float:
    """F-measure (1 + b2) * P * R / (b2 * P + R) on boolean masks."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise DimensionError(f"pred shape {p.shape} != gt shape {g.shape}")
    tp = float(np.logical_and(p, g).sum())
    n_pred = float(p.sum())
    n_gt = float(g.sum())
    precision = 1.0 if n_pred == 0 else tp / n_pred
    recall = 1.0 if n_gt == 0 else tp / n_gt
    denom = beta2 * precision + recall
    if denom == 0.0:
        return 0.0
    return (1.0 + beta2) * precision * recall / denom


def clip_frame_scores(
    pred: MaskSet,
    gt: MaskSet,
    threshold: float = DEFAULT_THRESHOLD,
    beta2: float = DEFAULT_BETA2,
) -> Tuple[List[float], List[float]]:
    """Per annotated frame (iou, fscore) lists, paired on gt.frame_indices."""
    if gt.kind is not MaskKind.BINARY:
        raise ValueError("ground truth must be a binary MaskSet")
    ious: List[float] = []
    fs: List[float] = []
    for mask, fi in zip(gt.masks, gt.frame_indices):
        p = pred.mask_for(fi)
        if p is None:
            raise ValueError(f"prediction is missing a mask for annotated frame {fi}")
        if p.shape != mask.shape:
            raise DimensionError(f"frame {fi}: pred shape {p.shape} != gt shape {mask.shape}")
        pb = binarize(p, threshold) if pred.kind is MaskKind.SOFT else np.asarray(p, dtype=bool)
        gb = np.asarray(mask, dtype=bool)
        ious.append(frame_iou(pb, gb))
        fs.append(frame_fscore(pb, gb, beta2))
    return ious, fs


@dataclass(frozen=True)
class MetricSummary:
    m_j: float          # mean Jaccard x 100
    m_f: float          # mean F-score in [0, 1]
    num_frames: int
    num_clips: int

    def to_dict(self) -> dict:
        return {
            "mJ": self.m_j,
            "mF": self.m_f,
            "num_frames": self.num_frames,
            "num_clips": self.num_clips,
        }


def summarize(
    pairs: Iterable[Tuple[MaskSet, MaskSet]],
    threshold: float = DEFAULT_THRESHOLD,
    beta2: float = DEFAULT_BETA2,
) -> MetricSummary:
    """Aggregate (pred, gt) MaskSet pairs over all annotated frames."""
    all_iou: List[float] = []
    all_f: List[float] = []
    clips = 0
    for pred, gt in pairs:
        ious, fs = clip_frame_scores(pred, gt, threshold=threshold, beta2=beta2)
        all_iou.extend(ious)
        all_f.extend(fs)
        clips += 1
    if not all_iou:
        raise ValueError("no annotated frames to evaluate")
    return MetricSummary(
        m_j=100.0 * float(np.mean(all_iou)),
        m_f=float(np.mean(all_f)),
        num_frames=len(all_iou),
        num_clips=clips,
    )
