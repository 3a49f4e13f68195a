"""Training losses: binary cross-entropy plus soft IoU, summed unweighted.

Both losses consume decoder probabilities (not logits). BCE clamps
probabilities to [1e-7, 1 - 1e-7] and averages over every annotated pixel;
the soft IoU loss is computed per annotated frame and then averaged, with
an epsilon of 1e-6 guarding empty masks. Only annotated frames contribute:
for an S4 training clip that is frame 1 alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
import torch

from .datamodel import MaskKind, MaskSet
from .errors import DimensionError

PROB_EPS = 1e-7
IOU_EPS = 1e-6


@dataclass(frozen=True)
class LossBreakdown:
    bce: float
    iou: float
    total: float

    def __post_init__(self):
        if not (np.isfinite(self.bce) and np.isfinite(self.iou) and np.isfinite(self.total)):
            raise ValueError(f"non-finite loss breakdown: {self}")
        if self.total != self.bce + self.iou:
            raise ValueError("total must equal bce + iou exactly")

    @classmethod
    def from_parts(cls, bce: float, iou: float) -> "LossBreakdown":
        return cls(bce=bce, iou=iou, total=bce + iou)


# -- tensor-level forms (used by the training loop; differentiable) ----------

def bce_terms(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean BCE over all elements, probabilities clamped to [eps, 1-eps]."""
    if pred.shape != gt.shape:
        raise DimensionError(f"pred shape {tuple(pred.shape)} != gt shape {tuple(gt.shape)}")
    if pred.numel() == 0:
        raise ValueError("BCE over an empty annotated set is undefined")
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    g = gt.to(p.dtype)
    return -(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)).mean()


def soft_iou_frame(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """1 - (sum p*g + eps) / (sum p + sum g - sum p*g + eps) for one frame."""
    if pred.shape != gt.shape:
        raise DimensionError(f"pred shape {tuple(pred.shape)} != gt shape {tuple(gt.shape)}")
    g = gt.to(pred.dtype)
    inter = (pred * g).sum()
    union = pred.sum() + g.sum() - inter
    return 1.0 - (inter + IOU_EPS) / (union + IOU_EPS)


def iou_terms(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-frame soft IoU losses averaged; pred/gt are (T, H, W) stacks."""
    if pred.shape != gt.shape:
        raise DimensionError(f"pred shape {tuple(pred.shape)} != gt shape {tuple(gt.shape)}")
    if pred.ndim == 2:
        return soft_iou_frame(pred, gt)
    frames = [soft_iou_frame(pred[i], gt[i]) for i in range(pred.shape[0])]
    return torch.stack(frames).mean()


def total_terms(pred: torch.Tensor, gt: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    bce = bce_terms(pred, gt)
    iou = iou_terms(pred, gt)
    return bce, iou, bce + iou


# -- MaskSet-level forms -------------------------------------------------------

def _paired_tensors(pred: MaskSet, gt: MaskSet) -> Tuple[list, list]:
    """Align prediction masks with annotated ground-truth frames."""
    if gt.kind is not MaskKind.BINARY:
        raise ValueError("ground truth must be a binary MaskSet")
    if not gt.frame_indices:
        raise ValueError("ground truth has no annotated frames")
    preds, gts = [], []
    for mask, fi in zip(gt.masks, gt.frame_indices):
        p = pred.mask_for(fi)
        if p is None:
            raise ValueError(f"prediction is missing a mask for annotated frame {fi}")
        if p.shape != mask.shape:
            raise DimensionError(
                f"frame {fi}: pred shape {p.shape} != gt shape {mask.shape}"
            )
        preds.append(torch.from_numpy(np.asarray(p, dtype=np.float64)))
        gts.append(torch.from_numpy(np.asarray(mask, dtype=np.float64)))
    return preds, gts


def bce_loss(pred: MaskSet, gt: MaskSet) -> float:
    """Mean BCE over all annotated pixels of the clip."""
    preds, gts = _paired_tensors(pred, gt)
    flat_p = torch.cat([p.reshape(-1) for p in preds])
    flat_g = torch.cat([g.reshape(-1) for g in gts])
    return float(bce_terms(flat_p, flat_g))


def iou_loss(pred: MaskSet, gt: MaskSet) -> float:
    """Soft IoU loss per annotated frame, averaged."""
    preds, gts = _paired_tensors(pred, gt)
    losses = [soft_iou_frame(p, g) for p, g in zip(preds, gts)]
    return float(torch.stack(losses).mean())


def total_loss(pred: MaskSet, gt: MaskSet) -> LossBreakdown:
    return LossBreakdown.from_parts(bce_loss(pred, gt), iou_loss(pred, gt))
