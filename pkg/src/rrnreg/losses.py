"""Unsupervised registration objective: local cross-correlation + total variation.

The similarity term sums squared Pearson coefficients over a box window
centered at every voxel; windows are cropped at the boundary (local sums are
divided by the true in-bounds count, not the nominal window size). The
regularity term is the mean absolute forward difference of the displacement
field, smoothed for differentiability. Both run on torch tensors and are
differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

LCC_EPS = 1e-5
TV_DELTA = 1e-6


def _box_sum(t: torch.Tensor, window: int) -> torch.Tensor:
    """Separable sliding-window sum with zero padding, (D, H, W) -> (D, H, W)."""
    pad = window // 2
    x = t.unsqueeze(0).unsqueeze(0)
    for axis in range(3):
        shape = [1, 1, 1, 1, 1]
        shape[2 + axis] = window
        kernel = torch.ones(shape, dtype=t.dtype, device=t.device)
        padding = [0, 0, 0]
        padding[axis] = pad
        x = F.conv3d(x, kernel, padding=tuple(padding))
    return x[0, 0]


def lcc(i_fix: torch.Tensor, i_warp: torch.Tensor, window: int = 7, eps: float = LCC_EPS) -> torch.Tensor:
    """Sum over voxels of the squared local correlation coefficient.

    Each coefficient lies in [0, 1]; identical, locally non-constant images
    score ~1 per voxel. Differentiable w.r.t. both images.
    """
    if i_fix.shape != i_warp.shape or i_fix.ndim != 3:
        raise ValueError(f"images must share a (D, H, W) shape, got {tuple(i_fix.shape)} / {tuple(i_warp.shape)}")
    if window % 2 == 0 or window < 3:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    ones = torch.ones_like(i_fix)
    n = _box_sum(ones, window)
    s_f = _box_sum(i_fix, window)
    s_w = _box_sum(i_warp, window)
    s_ff = _box_sum(i_fix * i_fix, window)
    s_ww = _box_sum(i_warp * i_warp, window)
    s_fw = _box_sum(i_fix * i_warp, window)
    cross = s_fw - s_f * s_w / n
    var_f = s_ff - s_f * s_f / n
    var_w = s_ww - s_w * s_w / n
    cc = cross * cross / (var_f * var_w + eps)
    return cc.sum()


def tv(d: torch.Tensor, delta: float = TV_DELTA) -> torch.Tensor:
    """Mean absolute forward difference of a (3, D, H, W) field.

    Averages over the three axes, the three displacement channels and the
    voxel count; differences past the far boundary are omitted. |t| is
    smoothed to sqrt(t^2 + delta^2).
    """
    if d.ndim != 4 or d.shape[0] != 3:
        raise ValueError(f"expected (3, D, H, W), got {tuple(d.shape)}")
    n_vox = d.shape[1] * d.shape[2] * d.shape[3]
    total = d.new_zeros(())
    for axis in (1, 2, 3):
        n = d.shape[axis]
        if n < 2:
            continue
        diff = d.narrow(axis, 1, n - 1) - d.narrow(axis, 0, n - 1)
        total = total + torch.sqrt(diff * diff + delta * delta).sum()
    return total / (9.0 * n_vox)


@dataclass
class LossValue:
    """Combined objective with its components; total = -lcc + lam * tv.

    `total`, `lcc` (the voxel-mean similarity) and `tv` are torch scalars so
    the value can be back-propagated directly; use floats() for logging.
    """

    total: torch.Tensor
    lcc: torch.Tensor
    tv: torch.Tensor
    lam: float

    def floats(self) -> tuple[float, float, float]:
        return float(self.total.detach()), float(self.lcc.detach()), float(self.tv.detach())


def total_loss(
    i_fix: torch.Tensor,
    i_warp: torch.Tensor,
    d_full: torch.Tensor,
    lam: float = 0.01,
    window: int = 7,
) -> LossValue:
    """total = -mean local correlation + lam * field total variation.

    The similarity sum is divided by the voxel count so `lam` keeps one
    meaning across volume sizes.
    """
    if i_fix.shape != d_full.shape[1:]:
        raise ValueError(f"field dims {tuple(d_full.shape[1:])} must match image dims {tuple(i_fix.shape)}")
    n_vox = i_fix.numel()
    lcc_mean = lcc(i_fix, i_warp, window) / n_vox
    tv_term = tv(d_full)
    return LossValue(total=-lcc_mean + lam * tv_term, lcc=lcc_mean, tv=tv_term, lam=lam)
