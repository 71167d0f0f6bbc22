"""Coarse-to-fine registration network.

Two Siamese 4-level feature pyramids feed per-level cost-correlation volumes;
lightweight field estimators predict a displacement field at the coarsest
level and refine it level by level, warping the moving features with the
upsampled field before each refinement. The finest estimator is a dilated
convolution stack predicting a residual on the upsampled field; its output is
upsampled once more to input resolution.

Parameters live in a flat named-tensor dict so checkpoints, the optimizer and
gradient checks all share one manifest.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import costvolume as cv
from .diffcore import concat_channels, conv3, leaky_relu, upsample2x, warp
from .voldata import Dvf, Volume

PYRAMID_CHANNELS = (16, 32, 64, 96)
DENSE_CHANNELS = (128, 128, 96, 64, 32)
CONTEXT_CHANNELS = 32
FINAL_CHANNELS = (128, 128, 128, 96, 64, 32, 3)
FINAL_DILATIONS = (1, 2, 4, 8, 16, 1, 1)
N_LEVELS = 4
MIN_INPUT_DIM = 16

MODES = ("cost_volume", "feature_concat")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs that change parameter shapes or the forward pass."""

    radius: int = 2
    neighborhood: str = "l1"
    mode: str = "cost_volume"
    lrelu_slope: float = 0.1
    warp_padding: str = "zeros"
    normalize_per_channel: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        cv.neighborhood_offsets(self.radius, self.neighborhood)  # validates radius/norm

    @property
    def cost_channels(self) -> int:
        return int(cv.neighborhood_offsets(self.radius, self.neighborhood).shape[0])

    def sim_channels(self, level: int) -> int:
        """Channels of the similarity block fed to the level's estimator."""
        if self.mode == "cost_volume":
            return self.cost_channels
        return PYRAMID_CHANNELS[level - 1]

    def estimator_input_channels(self, level: int) -> int:
        feat = PYRAMID_CHANNELS[level - 1]
        extra = 0 if level == N_LEVELS else 3 + CONTEXT_CHANNELS
        return self.sim_channels(level) + feat + extra


@dataclass
class ModelParams:
    """All learnable weights, keyed by name, plus the config that shaped them."""

    tensors: "OrderedDict[str, torch.Tensor]"
    config: ModelConfig

    @property
    def manifest(self) -> list[tuple[str, tuple[int, ...], str]]:
        return [
            (name, tuple(t.shape), "f64" if t.dtype == torch.float64 else "f32")
            for name, t in self.tensors.items()
        ]

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def clone(self) -> "ModelParams":
        return ModelParams(
            OrderedDict((k, t.detach().clone()) for k, t in self.tensors.items()), self.config
        )

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self


def expected_manifest(config: ModelConfig, dtype: str = "f32") -> list[tuple[str, tuple[int, ...], str]]:
    """Name/shape table implied by the channel plans, without allocating tensors."""
    rows: list[tuple[str, tuple[int, ...], str]] = []

    def add_conv(name: str, c_out: int, c_in: int) -> None:
        rows.append((f"{name}.weight", (c_out, c_in, 3, 3, 3), dtype))
        rows.append((f"{name}.bias", (c_out,), dtype))

    c_prev = 1
    for level, c_out in enumerate(PYRAMID_CHANNELS, start=1):
        add_conv(f"pyramid.l{level}.c0", c_out, c_prev)
        add_conv(f"pyramid.l{level}.c1", c_out, c_out)
        add_conv(f"pyramid.l{level}.c2", c_out, c_out)
        c_prev = c_out

    for level in (4, 3, 2):
        c_in = config.estimator_input_channels(level)
        for j, c_out in enumerate(DENSE_CHANNELS):
            add_conv(f"est{level}.dense{j}", c_out, c_in)
            c_in += c_out
        add_conv(f"est{level}.pred", 3, CONTEXT_CHANNELS)

    c_in = config.estimator_input_channels(1)
    for j, c_out in enumerate(FINAL_CHANNELS):
        add_conv(f"final.c{j}", c_out, c_in)
        c_in = c_out
    return rows


def init_params(seed: int, config: ModelConfig | None = None, dtype: torch.dtype = torch.float32) -> ModelParams:
    """Deterministic fan-in-scaled uniform init; displacement-emitting output
    layers start at exactly zero so a fresh model is the identity transform."""
    config = config or ModelConfig()
    gen = torch.Generator().manual_seed(seed)
    gain = math.sqrt(2.0 / (1.0 + config.lrelu_slope**2))
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for name, shape, _ in expected_manifest(config):
        t = torch.empty(shape, dtype=dtype)
        zero_init = name.startswith(("est4.pred", "est3.pred", "est2.pred", "final.c6"))
        if zero_init:
            t.zero_()
        elif name.endswith(".weight"):
            fan_in = shape[1] * 27
            bound = gain * math.sqrt(3.0 / fan_in)
            t.uniform_(-bound, bound, generator=gen)
        else:
            fan_in = _weight_fan_in(tensors, name)
            bound = 1.0 / math.sqrt(fan_in)
            t.uniform_(-bound, bound, generator=gen)
        tensors[name] = t
    return ModelParams(tensors, config)


def _weight_fan_in(tensors: "OrderedDict[str, torch.Tensor]", bias_name: str) -> int:
    w = tensors[bias_name.replace(".bias", ".weight")]
    return w.shape[1] * 27


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-level feature maps, level 1 finest (input/2) to level 4 coarsest (input/16)."""

    levels: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if len(self.levels) != N_LEVELS:
            raise ValueError(f"expected {N_LEVELS} levels, got {len(self.levels)}")
        for lvl, (t, c) in enumerate(zip(self.levels, PYRAMID_CHANNELS), start=1):
            if t.shape[0] != c:
                raise ValueError(f"level {lvl} has {t.shape[0]} channels, plan says {c}")

    def level(self, l: int) -> torch.Tensor:
        return self.levels[l - 1]


def extract_pyramid(params: ModelParams, vol: torch.Tensor) -> FeaturePyramid:
    """Shared-weight feature extractor: per level one stride-2 conv then two
    stride-1 convs, all LeakyReLU-activated."""
    if vol.ndim == 3:
        vol = vol.unsqueeze(0)
    if vol.ndim != 4:
        raise ValueError(f"expected (D, H, W) or (1, D, H, W), got {tuple(vol.shape)}")
    if any(n < MIN_INPUT_DIM for n in vol.shape[1:]):
        raise ValueError(f"input dims {tuple(vol.shape[1:])} below minimum {MIN_INPUT_DIM}")
    slope = params.config.lrelu_slope
    t = params.tensors
    x = vol
    levels = []
    for level in range(1, N_LEVELS + 1):
        x = leaky_relu(conv3(x, t[f"pyramid.l{level}.c0.weight"], t[f"pyramid.l{level}.c0.bias"], stride=2), slope)
        x = leaky_relu(conv3(x, t[f"pyramid.l{level}.c1.weight"], t[f"pyramid.l{level}.c1.bias"]), slope)
        x = leaky_relu(conv3(x, t[f"pyramid.l{level}.c2.weight"], t[f"pyramid.l{level}.c2.bias"]), slope)
        levels.append(x)
    return FeaturePyramid(tuple(levels))


def _dense_block(params: ModelParams, prefix: str, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Densely connected block; returns (field, context). The context is the
    32-channel last dense layer, the field comes from the zero-initializable
    prediction convolution on top of it."""
    slope = params.config.lrelu_slope
    t = params.tensors
    feats = x
    y = x
    for j in range(len(DENSE_CHANNELS)):
        y = leaky_relu(conv3(feats, t[f"{prefix}.dense{j}.weight"], t[f"{prefix}.dense{j}.bias"]), slope)
        feats = concat_channels(feats, y)
    ctx = y
    dvf = conv3(ctx, t[f"{prefix}.pred.weight"], t[f"{prefix}.pred.bias"])
    return dvf, ctx


def _check_level_inputs(level: int, config: ModelConfig, *tensors_in: torch.Tensor) -> None:
    spatial = tensors_in[0].shape[1:]
    for t in tensors_in[1:]:
        if t.shape[1:] != spatial:
            raise ValueError(f"level {level}: spatial dims differ, {tuple(t.shape[1:])} vs {tuple(spatial)}")


def _sim_tensor(sim: cv.CostVolume | torch.Tensor) -> torch.Tensor:
    return sim.data if isinstance(sim, cv.CostVolume) else sim


def estimate_initial(params: ModelParams, cost: cv.CostVolume | torch.Tensor, f_fix: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Coarsest-level estimator: consumes similarity + fixed features only."""
    sim = _sim_tensor(cost)
    _check_level_inputs(4, params.config, sim, f_fix)
    x = concat_channels(sim, f_fix)
    _check_estimator_width(params, "est4", x, 4)
    return _dense_block(params, "est4", x)


def estimate_intermediate(
    params: ModelParams,
    level: int,
    cost: cv.CostVolume | torch.Tensor,
    f_fix: torch.Tensor,
    up_dvf: torch.Tensor,
    up_ctx: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mid-level estimator; each level has its own weights."""
    if level not in (2, 3):
        raise ValueError(f"intermediate estimators exist at levels 2 and 3, got {level}")
    sim = _sim_tensor(cost)
    _check_level_inputs(level, params.config, sim, f_fix, up_dvf, up_ctx)
    x = concat_channels(sim, f_fix, up_dvf, up_ctx)
    _check_estimator_width(params, f"est{level}", x, level)
    return _dense_block(params, f"est{level}", x)


def estimate_final(
    params: ModelParams,
    cost: cv.CostVolume | torch.Tensor,
    f_fix: torch.Tensor,
    up_dvf: torch.Tensor,
    up_ctx: torch.Tensor,
) -> torch.Tensor:
    """Finest-level estimator: dilated convolution stack emitting a residual
    on the upsampled field."""
    sim = _sim_tensor(cost)
    _check_level_inputs(1, params.config, sim, f_fix, up_dvf, up_ctx)
    x = concat_channels(sim, f_fix, up_dvf, up_ctx)
    _check_estimator_width(params, "final", x, 1)
    slope = params.config.lrelu_slope
    t = params.tensors
    last = len(FINAL_CHANNELS) - 1
    for j, dilation in enumerate(FINAL_DILATIONS):
        x = conv3(x, t[f"final.c{j}.weight"], t[f"final.c{j}.bias"], dilation=dilation)
        if j != last:
            x = leaky_relu(x, slope)
    return up_dvf + x


def _check_estimator_width(params: ModelParams, prefix: str, x: torch.Tensor, level: int) -> None:
    first = "dense0" if prefix.startswith("est") else "c0"
    expected = params.tensors[f"{prefix}.{first}.weight"].shape[1]
    if x.shape[0] != expected:
        raise ValueError(
            f"level {level} estimator expects {expected} input channels, assembled {x.shape[0]}; "
            "model config and inputs disagree"
        )


@dataclass
class RegistrationResult:
    """Output of one registration: field at input resolution, the per-level
    fields that produced it (coarsest first), and the warped moving volume."""

    dvf_full: Dvf
    per_level_dvfs: list[Dvf]
    warped_moving: Volume


def register_tensors(params: ModelParams, mov: torch.Tensor, fix: torch.Tensor) -> dict:
    """Differentiable forward pass on (D, H, W) tensors with dims divisible by 16.

    Returns tensors: dvf_full (3, D, H, W), per_level [level 4..1], warped (D, H, W).
    """
    if mov.shape != fix.shape:
        raise ValueError(f"moving {tuple(mov.shape)} and fixed {tuple(fix.shape)} dims differ")
    if any(n % 16 != 0 for n in mov.shape[-3:]):
        raise ValueError(f"input dims {tuple(mov.shape[-3:])} must be divisible by 16")
    cfg = params.config
    pyr_mov = extract_pyramid(params, mov)
    pyr_fix = extract_pyramid(params, fix)

    def similarity(f_m: torch.Tensor, f_f: torch.Tensor) -> torch.Tensor:
        if cfg.mode == "cost_volume":
            a = cv.normalize_features(f_m, per_channel=cfg.normalize_per_channel)
            b = cv.normalize_features(f_f, per_channel=cfg.normalize_per_channel)
            return cv.correlate(a, b, cfg.radius, cfg.neighborhood).data
        return f_m

    per_level: list[torch.Tensor] = []
    sim4 = similarity(pyr_mov.level(4), pyr_fix.level(4))
    dvf, ctx = estimate_initial(params, sim4, pyr_fix.level(4))
    per_level.append(dvf)

    for level in (3, 2):
        up_dvf = upsample2x(dvf, scale_values=True)
        up_ctx = upsample2x(ctx)
        warped = warp(pyr_mov.level(level), up_dvf, cfg.warp_padding)
        sim = similarity(warped, pyr_fix.level(level))
        dvf, ctx = estimate_intermediate(params, level, sim, pyr_fix.level(level), up_dvf, up_ctx)
        per_level.append(dvf)

    up_dvf = upsample2x(dvf, scale_values=True)
    up_ctx = upsample2x(ctx)
    warped = warp(pyr_mov.level(1), up_dvf, cfg.warp_padding)
    sim = similarity(warped, pyr_fix.level(1))
    dvf1 = estimate_final(params, sim, pyr_fix.level(1), up_dvf, up_ctx)
    per_level.append(dvf1)

    dvf_full = upsample2x(dvf1, scale_values=True)
    warped_moving = warp(mov, dvf_full, cfg.warp_padding)
    return {"dvf_full": dvf_full, "per_level": per_level, "warped": warped_moving}


def volume_to_tensor(v: Volume, dtype: torch.dtype = torch.float32, hu_rescale: bool = True) -> torch.Tensor:
    """Volume data as a (D, H, W) tensor; HU volumes are mapped through the
    standard lung window [-1000, -100] -> [0, 1] unless disabled."""
    t = torch.from_numpy(np.ascontiguousarray(v.data)).to(dtype)
    if hu_rescale and v.units == "HU":
        t = (t + 1000.0) / 900.0
    return t


def register(
    params: ModelParams,
    mov: Volume,
    fix: Volume,
    mode: str | None = None,
    hu_rescale: bool = True,
    grid_tag: str | None = None,
) -> RegistrationResult:
    """Non-differentiable convenience wrapper producing numpy-backed results."""
    if mode is not None and mode != params.config.mode:
        raise ValueError(
            f"requested mode {mode!r} but parameters were built for {params.config.mode!r}; "
            "re-initialize with the desired mode"
        )
    if mov.dims != fix.dims:
        raise ValueError(f"moving {mov.dims} and fixed {fix.dims} dims differ")
    with torch.no_grad():
        out = register_tensors(
            params,
            volume_to_tensor(mov, params.dtype, hu_rescale),
            volume_to_tensor(fix, params.dtype, hu_rescale),
        )
        # warp the original-intensity data so output units match the input and
        # a zero field reproduces the moving volume bit-exactly
        raw = torch.from_numpy(np.ascontiguousarray(mov.data)).to(params.dtype)
        warped_t = warp(raw, out["dvf_full"], params.config.warp_padding)
    per_level = [
        Dvf(d.detach().cpu().numpy().astype(np.float32), level=lvl, grid_tag=grid_tag)
        for d, lvl in zip(out["per_level"], (4, 3, 2, 1))
    ]
    dvf_full = Dvf(out["dvf_full"].detach().cpu().numpy().astype(np.float32), level=0, grid_tag=grid_tag)
    warped = replace(mov, data=warped_t.cpu().numpy().astype(np.float32), units=mov.units)
    return RegistrationResult(dvf_full, per_level, warped)
