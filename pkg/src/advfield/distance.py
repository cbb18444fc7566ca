"""Consistency distances between two per-pixel class-probability maps.

Maps are ``(C, H, W)`` or batched ``(N, C, H, W)``. For batches the KL term
is the mean over all pixels and the contour term the mean over samples.
"""
from __future__ import annotations

from typing import Iterable

import torch

from .tensor import DTYPE, conv2d

EPS = 1e-8
SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=DTYPE)
SOBEL_Y = SOBEL_X.T.contiguous()
_DIFF = torch.tensor([[-1.0, 0.0, 1.0]], dtype=DTYPE)
_SMOOTH = torch.tensor([[1.0], [2.0], [1.0]], dtype=DTYPE)


def sobel(x: torch.Tensor, axis: str = "x") -> torch.Tensor:
    """Sobel response with replicate borders, applied separably.

    Differencing first makes constant inputs give exactly zero.
    """
    if axis == "x":
        return conv2d(conv2d(x, _DIFF, "replicate"), _SMOOTH, "replicate")
    if axis == "y":
        return conv2d(conv2d(x, _DIFF.T, "replicate"), _SMOOTH.T, "replicate")
    raise ValueError("axis must be 'x' or 'y'")


def _check_pair(p: torch.Tensor, phat: torch.Tensor) -> None:
    if p.shape != phat.shape:
        raise ValueError(f"probability maps differ in shape: {tuple(p.shape)} vs {tuple(phat.shape)}")
    if p.dim() not in (3, 4):
        raise ValueError("probability maps must be (C, H, W) or (N, C, H, W)")


def kl(p: torch.Tensor, phat: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Pixel-mean of sum_c p log((p + eps) / (phat + eps)).

    ``reduction="none"`` keeps one value per batch element.
    """
    _check_pair(p, phat)
    per_pixel = (p * (torch.log(p + EPS) - torch.log(phat + EPS))).sum(dim=-3)
    if reduction == "none":
        return per_pixel.mean(dim=(-2, -1))
    return per_pixel.mean()


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    # Euclidean norm over the last two axes with a zero (not NaN) gradient at 0
    sq = (x * x).sum(dim=(-2, -1))
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def contour(p: torch.Tensor, phat: torch.Tensor, foreground: Iterable[int] = (1,),
            reduction: str = "mean") -> torch.Tensor:
    """Sum over foreground channels and both Sobel filters of ||S(p_m) - S(phat_m)||_2.

    Edge maps use replicate padding so constant maps have no edges.
    """
    _check_pair(p, phat)
    fg = sorted(set(int(m) for m in foreground))
    if not fg:
        raise ValueError("foreground channel set is empty")
    n_ch = p.shape[-3]
    if fg[0] < 0 or fg[-1] >= n_ch:
        raise ValueError(f"foreground channels {fg} out of range for {n_ch} channels")
    diff = (p - phat)[..., fg, :, :]
    total = 0
    for axis in ("x", "y"):
        # Sobel is linear, so S(p) - S(phat) = S(p - phat)
        total = total + _safe_norm(sobel(diff, axis)).sum(dim=-1)
    if reduction == "none" or p.dim() == 3:
        return total
    return total.mean()


def composite(p: torch.Tensor, phat: torch.Tensor, w: float = 0.5, foreground: Iterable[int] = (1,),
              reduction: str = "mean") -> torch.Tensor:
    """kl(p, phat) + w * contour(p, phat)."""
    if w < 0:
        raise ValueError("w must be non-negative")
    d = kl(p, phat, reduction)
    if w == 0:
        return d
    return d + w * contour(p, phat, foreground, reduction)
