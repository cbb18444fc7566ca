"""Overlap metrics on integer label masks."""
from __future__ import annotations

import numpy as np
import torch


def _np(mask) -> np.ndarray:
    return mask.detach().cpu().numpy() if torch.is_tensor(mask) else np.asarray(mask)


def dice(pred, gt, cls: int = 1) -> float:
    """2|A∩B| / (|A| + |B|) for the pixels labelled ``cls``; 1.0 when both are empty."""
    a, b = _np(pred), _np(gt)
    if a.shape != b.shape:
        raise ValueError(f"mask extents differ: {a.shape} vs {b.shape}")
    a = a == cls
    b = b == cls
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def mean_dice(preds, gts, cls: int = 1) -> float:
    scores = [dice(p, g, cls) for p, g in zip(preds, gts)]
    return float(np.mean(scores)) if scores else float("nan")
