"""Differentiable volumetric operators and the finite-difference gradient checker.

Operators act on plain torch tensors laid out channel-major without a batch
axis: feature maps are (C, D, H, W), displacement fields (3, D, H, W) in voxel
units of their own grid (channel 0 = z). Gradients come from reverse-mode
autodiff through these compositions; `gradcheck` verifies them against central
finite differences computed by forward evaluation only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

ALLOWED_STRIDES = (1, 2)
ALLOWED_DILATIONS = (1, 2, 4, 8, 16)


def conv3(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
) -> torch.Tensor:
    """3x3x3 convolution. Stride 1 preserves spatial dims (zero padding =
    dilation); stride 2 halves them to ceil(n/2) with padding 1."""
    if weight.ndim != 5 or weight.shape[2:] != (3, 3, 3):
        raise ValueError(f"kernel must be (c_out, c_in, 3, 3, 3), got {tuple(weight.shape)}")
    if x.shape[0] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[0]} channels, kernel expects {weight.shape[1]}")
    if stride not in ALLOWED_STRIDES:
        raise ValueError(f"stride must be one of {ALLOWED_STRIDES}, got {stride}")
    if dilation not in ALLOWED_DILATIONS:
        raise ValueError(f"dilation must be one of {ALLOWED_DILATIONS}, got {dilation}")
    if stride == 2 and dilation != 1:
        raise ValueError("stride 2 supports dilation 1 only")
    padding = dilation if stride == 1 else 1
    return F.conv3d(x.unsqueeze(0), weight, bias, stride=stride, padding=padding, dilation=dilation)[0]


def leaky_relu(x: torch.Tensor, slope: float = 0.1) -> torch.Tensor:
    """y = x for x >= 0, slope * x otherwise."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    return F.leaky_relu(x, negative_slope=slope)


def _upsample_axis2x(t: torch.Tensor, dim: int) -> torch.Tensor:
    # fine position p samples the coarse grid at p/2: even sites copy,
    # odd sites average neighbours, far edge clamps
    n = t.size(dim)
    tail = t.narrow(dim, n - 1, 1)
    shifted = torch.cat([t.narrow(dim, 1, n - 1), tail], dim) if n > 1 else tail
    mid = 0.5 * (t + shifted)
    return torch.stack([t, mid], dim=dim + 1).flatten(dim, dim + 1)


def upsample2x(x: torch.Tensor, scale_values: bool = False) -> torch.Tensor:
    """Double every spatial dim by trilinear interpolation on the p -> p/2 map.

    With scale_values=True displacement components are also doubled, converting
    coarse-grid voxel units to fine-grid voxel units.
    """
    if x.ndim != 4:
        raise ValueError(f"expected (C, D, H, W), got shape {tuple(x.shape)}")
    out = x
    for dim in (1, 2, 3):
        out = _upsample_axis2x(out, dim)
    return out * 2.0 if scale_values else out


def warp(x: torch.Tensor, d: torch.Tensor, padding: str = "zeros") -> torch.Tensor:
    """Trilinear pull-back warp: out[:, p] = x sampled at p + d[:, p].

    Samples outside the grid read 0 ("zeros") or clamp to the border
    ("border"). A zero field reproduces the input bit-exactly. Gradients flow
    to both the image and the displacement field.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.ndim != 4 or d.ndim != 4 or d.shape[0] != 3:
        raise ValueError(f"expected image (C, D, H, W) and field (3, D, H, W), got {tuple(x.shape)} / {tuple(d.shape)}")
    if x.shape[1:] != d.shape[1:]:
        raise ValueError(f"spatial dims differ: image {tuple(x.shape[1:])} vs field {tuple(d.shape[1:])}")
    if padding not in ("zeros", "border"):
        raise ValueError(f"padding must be 'zeros' or 'border', got {padding!r}")
    c, dz, dy, dx = x.shape
    base = torch.stack(
        torch.meshgrid(
            torch.arange(dz, dtype=x.dtype, device=x.device),
            torch.arange(dy, dtype=x.dtype, device=x.device),
            torch.arange(dx, dtype=x.dtype, device=x.device),
            indexing="ij",
        )
    )
    pos = base + d
    lo = pos.floor()
    frac = pos - lo
    lo = lo.long()

    dims = (dz, dy, dx)
    flat = x.reshape(c, -1)
    out = torch.zeros_like(x)
    for corner in range(8):
        bits = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        idx_axes = []
        weight = None
        valid = None
        for axis, bit in enumerate(bits):
            ia = lo[axis] + bit
            wa = frac[axis] if bit else 1.0 - frac[axis]
            if padding == "zeros":
                va = (ia >= 0) & (ia <= dims[axis] - 1)
                valid = va if valid is None else valid & va
            idx_axes.append(ia.clamp(0, dims[axis] - 1))
            weight = wa if weight is None else weight * wa
        lin = (idx_axes[0] * dy + idx_axes[1]) * dx + idx_axes[2]
        vals = flat[:, lin.reshape(-1)].reshape(c, dz, dy, dx)
        if padding == "zeros":
            weight = weight * valid.to(x.dtype)
        out = out + vals * weight
    return out[0] if squeeze else out


def concat_channels(*maps: torch.Tensor) -> torch.Tensor:
    """Stack feature maps along the channel axis; spatial dims must agree."""
    if not maps:
        raise ValueError("need at least one feature map")
    spatial = maps[0].shape[1:]
    for m in maps[1:]:
        if m.shape[1:] != spatial:
            raise ValueError(f"spatial dims differ: {tuple(spatial)} vs {tuple(m.shape[1:])}")
    return maps[0] if len(maps) == 1 else torch.cat(maps, dim=0)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradReport:
    """Outcome of one analytic-vs-finite-difference comparison.

    max_rel_err is max |analytic - numeric| over the checked coordinates or
    directions, normalised by the larger gradient magnitude (floored at 1e-9).
    """

    op: str
    max_rel_err: float
    tolerance: float
    passed: bool

    def __str__(self) -> str:
        flag = "pass" if self.passed else "FAIL"
        return f"{self.op:<40s} {self.max_rel_err:12.3e}  tol {self.tolerance:.0e}  {flag}"


def _projection_loss(out: torch.Tensor, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed ^ 0x5EED)
    r = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    return (out * r).sum()


def gradcheck(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    *,
    name: str | None = None,
    tol: float = 1e-4,
    step: float = 1e-4,
    seed: int = 0,
    mode: str = "dense",
    n_directions: int = 4,
) -> GradReport:
    """Compare autodiff gradients of `fn` against central finite differences.

    The output is reduced to a scalar by a fixed random projection. "dense"
    mode perturbs every input coordinate; "directional" mode probes
    `n_directions` random unit directions per input. Inputs are promoted to
    double precision; the numeric side re-evaluates the forward pass only.
    """
    if mode not in ("dense", "directional"):
        raise ValueError(f"mode must be 'dense' or 'directional', got {mode!r}")
    leaves = [t.detach().double().clone().requires_grad_(True) for t in inputs]
    loss = _projection_loss(fn(*leaves), seed)
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    grads = [torch.zeros_like(l) if g is None else g for l, g in zip(leaves, grads)]

    def eval_at(tensors: list[torch.Tensor]) -> float:
        with torch.no_grad():
            return float(_projection_loss(fn(*tensors), seed))

    frozen = [t.detach().clone() for t in leaves]
    max_err = 0.0
    for which, grad in enumerate(grads):
        analytic = grad.detach()
        if mode == "dense":
            numeric = torch.zeros_like(analytic)
            flat_in = frozen[which].reshape(-1)
            flat_num = numeric.reshape(-1)
            for j in range(flat_in.numel()):
                orig = float(flat_in[j])
                flat_in[j] = orig + step
                f_plus = eval_at(frozen)
                flat_in[j] = orig - step
                f_minus = eval_at(frozen)
                flat_in[j] = orig
                flat_num[j] = (f_plus - f_minus) / (2.0 * step)
            scale = max(float(analytic.abs().max()), float(numeric.abs().max()), 1e-9)
            err = float((analytic - numeric).abs().max()) / scale
            max_err = max(max_err, err)
        else:
            gen = torch.Generator().manual_seed(seed + 7919 * which)
            for _ in range(n_directions):
                u = torch.randn(analytic.shape, generator=gen, dtype=torch.float64)
                u /= u.norm()
                a_dir = float((analytic * u).sum())
                saved = frozen[which].clone()
                frozen[which].add_(u, alpha=step)
                f_plus = eval_at(frozen)
                frozen[which].copy_(saved).add_(u, alpha=-step)
                f_minus = eval_at(frozen)
                frozen[which].copy_(saved)
                n_dir = (f_plus - f_minus) / (2.0 * step)
                err = abs(a_dir - n_dir) / max(abs(a_dir), abs(n_dir), 1e-9)
                max_err = max(max_err, err)

    return GradReport(
        op=name or getattr(fn, "__name__", "op"),
        max_rel_err=max_err,
        tolerance=tol,
        passed=max_err < tol,
    )


def receptive_field(dilations: Iterable[int], kernel: int = 3) -> int:
    """Per-axis receptive field of a stack of stride-1 convolutions."""
    return 1 + (kernel - 1) * sum(dilations)
