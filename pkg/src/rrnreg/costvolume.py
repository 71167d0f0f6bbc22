"""Normalized local cost-correlation volumes.

For every voxel x the volume stores the channel-averaged inner product between
the (warped) moving feature vector at x and the fixed feature vector at x + i,
for every integer offset i in a radius-r neighborhood. Features are normalized
to zero mean / unit deviation per map before correlation so coarse levels do
not vanish. `correlate_naive` is a deliberately loop-based twin kept as a
correctness oracle for the vectorized path.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
import torch

from .diffcore import concat_channels  # noqa: F401  (re-exported for estimator assembly)

NEIGHBORHOOD_NORMS = ("l1", "linf")


def neighborhood_offsets(radius: int, norm: str = "l1") -> np.ndarray:
    """Integer offsets with |i| <= radius in the given norm, lexicographic order.

    The l1 ball has 7 offsets for r=1 and 25 for r=2; the linf cube has
    (2r+1)^3. The zero offset is always present.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if norm not in NEIGHBORHOOD_NORMS:
        raise ValueError(f"norm must be one of {NEIGHBORHOOD_NORMS}, got {norm!r}")
    span = range(-radius, radius + 1)
    if norm == "l1":
        offs = [o for o in product(span, span, span) if abs(o[0]) + abs(o[1]) + abs(o[2]) <= radius]
    else:
        offs = list(product(span, span, span))
    return np.asarray(sorted(offs), dtype=np.int64)


@dataclass(frozen=True)
class CostVolume:
    """Correlation scores (K, D, H, W) over an ordered offset list."""

    data: torch.Tensor
    offsets: np.ndarray
    radius: int
    norm: str

    def __post_init__(self):
        if self.data.shape[0] != self.offsets.shape[0]:
            raise ValueError(f"{self.data.shape[0]} score channels vs {self.offsets.shape[0]} offsets")

    @property
    def k(self) -> int:
        return int(self.offsets.shape[0])


def normalize_features(f: torch.Tensor, eps: float = 1e-6, per_channel: bool = False) -> torch.Tensor:
    """(f - mean) / (std + eps). Statistics span channels and space jointly by
    default; per_channel computes them per channel. Population std; constant
    maps land on zero. The variance is floored at 1e-30 so exactly-constant
    maps keep a zero gradient instead of a NaN from sqrt'(0)."""
    if per_channel:
        mu = f.mean(dim=(1, 2, 3), keepdim=True)
        var = (f - mu).square().mean(dim=(1, 2, 3), keepdim=True)
    else:
        mu = f.mean()
        var = (f - mu).square().mean()
    sigma = var.clamp_min(1e-30).sqrt()
    return (f - mu) / (sigma + eps)


def _check_pair(f_warped: torch.Tensor, f_fix: torch.Tensor) -> None:
    if f_warped.ndim != 4 or f_warped.shape != f_fix.shape:
        raise ValueError(f"feature maps must share a (C, D, H, W) shape, got {tuple(f_warped.shape)} / {tuple(f_fix.shape)}")


def correlate(f_warped: torch.Tensor, f_fix: torch.Tensor, radius: int = 2, norm: str = "l1") -> CostVolume:
    """C(x, i) = <f_warped(x), f_fix(x + i)> / channels; out-of-bounds x+i give 0."""
    _check_pair(f_warped, f_fix)
    offsets = neighborhood_offsets(radius, norm)
    c, dz, dy, dx = f_warped.shape
    dims = (dz, dy, dx)
    rows = []
    for off in offsets:
        src_slices = []
        dst_slices = []
        for axis in range(3):
            o = int(off[axis])
            start = max(0, -o)
            stop = max(start, min(dims[axis], dims[axis] - o))
            src_slices.append(slice(start, stop))
            dst_slices.append(slice(start + o, stop + o))
        scores = torch.zeros(dims, dtype=f_warped.dtype, device=f_warped.device)
        if all(s.stop > s.start for s in src_slices):
            a = f_warped[(slice(None), *src_slices)]
            b = f_fix[(slice(None), *dst_slices)]
            scores[tuple(src_slices)] = (a * b).sum(dim=0) / c
        rows.append(scores)
    return CostVolume(torch.stack(rows, dim=0), offsets, radius, norm)


def correlate_naive(f_warped: torch.Tensor, f_fix: torch.Tensor, radius: int = 2, norm: str = "l1") -> CostVolume:
    """Loop-based reference for `correlate`: same contract, no vectorization."""
    _check_pair(f_warped, f_fix)
    offsets = neighborhood_offsets(radius, norm)
    c, dz, dy, dx = f_warped.shape
    fw = f_warped.detach().cpu().double().numpy().tolist()
    ff = f_fix.detach().cpu().double().numpy().tolist()
    out = np.zeros((offsets.shape[0], dz, dy, dx), dtype=np.float64)
    for k, (oz, oy, ox) in enumerate(offsets):
        for z in range(dz):
            for y in range(dy):
                for x in range(dx):
                    zz, yy, xx = z + oz, y + oy, x + ox
                    if not (0 <= zz < dz and 0 <= yy < dy and 0 <= xx < dx):
                        continue
                    acc = 0.0
                    for ch in range(c):
                        acc += fw[ch][z][y][x] * ff[ch][zz][yy][xx]
                    out[k, z, y, x] = acc / c
    return CostVolume(torch.from_numpy(out).to(f_warped.dtype), offsets, radius, norm)
