"""Selective cross-entropy over sparse labels, and the Jaccard score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError
from .sparsifier import UNKNOWN


@dataclass
class LossValue:
    value: torch.Tensor
    contributing_pixels: int

    @property
    def empty(self) -> bool:
        """True when no pixel carried a label (``value`` is then 0)."""
        return self.contributing_pixels == 0


def as_target(labels) -> torch.Tensor:
    if isinstance(labels, torch.Tensor):
        t = labels
    else:
        t = torch.from_numpy(np.stack([np.asarray(m) for m in labels]) if isinstance(labels, (list, tuple))
                             else np.asarray(labels))
    t = t.long()
    return t[None] if t.dim() == 2 else t


def weighted_cross_entropy(scores: torch.Tensor, target, class_weights=None) -> LossValue:
    """Mean negative log-likelihood over labeled pixels; UNKNOWN pixels get weight 0.

    ``scores`` is ``N x C x H x W`` (or ``C x H x W``), ``target`` holds class
    indices or ``UNKNOWN``. With ``class_weights`` the mean is weighted.
    """
    if scores.dim() == 3:
        scores = scores[None]
    target = as_target(target).to(scores.device)
    if scores.shape[:1] + scores.shape[2:] != target.shape:
        raise DataError(f"scores {tuple(scores.shape)} and target {tuple(target.shape)} disagree")
    known = target != UNKNOWN
    weight = known.to(scores.dtype)
    safe = torch.where(known, target, torch.zeros_like(target))
    if class_weights is not None:
        cw = torch.as_tensor(class_weights, dtype=scores.dtype, device=scores.device)
        weight = weight * cw[safe]
    nll = -F.log_softmax(scores, dim=1).gather(1, safe[:, None]).squeeze(1)
    count = int(known.sum())
    if count == 0:
        return LossValue((scores * 0.0).sum(), 0)
    return LossValue((weight * nll).sum() / weight.sum(), count)


def jaccard(pred: np.ndarray, truth: np.ndarray) -> float:
    """Foreground IoU; two empty masks score 1.0."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    if not (np.isin(pred, (0, 1)).all() and np.isin(truth, (0, 1)).all()):
        raise DataError("jaccard needs binary masks")
    p, t = pred.astype(bool), truth.astype(bool)
    union = np.count_nonzero(p | t)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & t) / union
