"""Instance-optimization training loop with Adam updates and checkpointing.

Training iterates over the case list in fixed order with batch size 1:
forward registration, combined loss, reverse-mode gradients, one Adam step.
It stops when the moving average of the similarity term plateaus or at the
iteration cap, is bit-deterministic for a fixed seed/config, and resumes from
a checkpoint bitwise-identically to an uninterrupted run.
"""

from __future__ import annotations

import json
import math
import os
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable

import numpy as np
import torch

from .losses import total_loss
from .rrn import ModelConfig, ModelParams, expected_manifest, init_params, register_tensors, volume_to_tensor
from .voldata import Volume, atomic_write_bytes, atomic_write_text

CHECKPOINT_MAGIC = "RRNREG-CKPT"
CHECKPOINT_VERSION = 1

_NP_DTYPES = {"f32": "<f4", "f64": "<f8"}
_TORCH_DTYPES = {"f32": torch.float32, "f64": torch.float64}


class NonFiniteGradientError(RuntimeError):
    """A gradient tensor contained NaN or Inf; message names the parameter."""


class CheckpointError(RuntimeError):
    """Checkpoint file malformed or inconsistent with the expected model."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lam: float = 0.01
    batch_size: int = 1
    lcc_window: int = 7
    radius: int = 2
    neighborhood: str = "l1"
    mode: str = "cost_volume"
    plateau_window: int = 50
    plateau_tol: float = 1e-3
    max_iters: int = 2000
    seed: int = 0
    precision: str = "single"
    lrelu_slope: float = 0.1
    warp_padding: str = "zeros"
    normalize_per_channel: bool = False
    hu_rescale: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size != 1:
            raise ValueError("batch size is fixed at 1")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.max_iters < 0 or self.plateau_window < 1:
            raise ValueError("max_iters must be >= 0 and plateau_window >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            radius=self.radius,
            neighborhood=self.neighborhood,
            mode=self.mode,
            lrelu_slope=self.lrelu_slope,
            warp_padding=self.warp_padding,
            normalize_per_channel=self.normalize_per_channel,
        )

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "double" else torch.float32


_CONFIG_ALIASES = {"lambda": "lam"}


def config_from_dict(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from string-or-typed values; unknown keys rejected."""
    merged = asdict(base) if base is not None else asdict(TrainConfig())
    by_name = {f.name: f for f in fields(TrainConfig)}
    for raw_key, raw_val in values.items():
        key = _CONFIG_ALIASES.get(raw_key, raw_key)
        if key not in by_name:
            raise ValueError(f"unknown config key {raw_key!r}")
        ftype = by_name[key].type
        merged[key] = _coerce(raw_val, ftype, key)
    return TrainConfig(**merged)


def _coerce(value, ftype: str, key: str):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if ftype == "int":
        return int(text)
    if ftype == "float":
        return float(text)
    if ftype == "bool":
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {key!r}: cannot parse boolean from {text!r}")
    return text


def parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` configuration format, '#' comments allowed."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def render_config(cfg: TrainConfig) -> str:
    return "\n".join(f"{name} = {value}" for name, value in asdict(cfg).items()) + "\n"


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment estimates mirroring the parameter manifest."""

    m: "OrderedDict[str, torch.Tensor]"
    v: "OrderedDict[str, torch.Tensor]"
    t: int = 0


def init_adam_state(params: ModelParams) -> AdamState:
    return AdamState(
        m=OrderedDict((k, torch.zeros_like(p)) for k, p in params.tensors.items()),
        v=OrderedDict((k, torch.zeros_like(p)) for k, p in params.tensors.items()),
        t=0,
    )


def adam_step(
    params: ModelParams,
    grads: dict[str, torch.Tensor | None],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[ModelParams, AdamState]:
    """One Adam update, in place. Missing gradients count as zero, so unused
    parameters stay at initialization exactly (weight decay 0)."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    with torch.no_grad():
        for name, p in params.tensors.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            elif not torch.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
            if cfg.weight_decay != 0.0:
                g = g + cfg.weight_decay * p
            m, v = state.m[name], state.v[name]
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            p.add_(-(cfg.lr) * (m / bc1) / ((v / bc2).sqrt() + cfg.eps))
    return params, state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainHistory:
    """Per-iteration (iteration, total, lcc_mean, tv) records plus run metadata."""

    records: list[tuple[int, float, float, float]] = field(default_factory=list)
    wall_time: float = 0.0
    stopping_reason: str = ""


def _plateaued(records: list[tuple[int, float, float, float]], window: int, tol: float) -> bool:
    if len(records) < 2 * window:
        return False
    lcc_vals = [r[2] for r in records]
    now = sum(lcc_vals[-window:]) / window
    prev = sum(lcc_vals[-2 * window : -window]) / window
    return abs(now - prev) / max(abs(prev), 1e-12) < tol


def metrics_lines(history: TrainHistory) -> str:
    lines = ["# iter,total,lcc_mean,tv"]
    lines += [f"{it},{tot!r},{l!r},{t!r}" for it, tot, l, t in history.records]
    return "\n".join(lines) + "\n"


def train(
    cases: Iterable[tuple[Volume, Volume]],
    cfg: TrainConfig,
    *,
    params: ModelParams | None = None,
    state: AdamState | None = None,
    history: TrainHistory | None = None,
    metrics_path: str | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Optimize the model over (moving, fixed) pairs; see module docstring.

    Passing params/state/history from a checkpoint resumes the run; the
    remaining iterations reproduce an uninterrupted run bit-exactly. On a
    non-finite loss or gradient the last good parameters are returned and the
    stopping reason records the event.
    """
    case_list = list(cases)
    if not case_list:
        raise ValueError("need at least one (moving, fixed) case")
    dims = case_list[0][0].dims
    for mov, fix in case_list:
        if mov.dims != dims or fix.dims != dims:
            raise ValueError("all cases must share one preprocessed grid")

    if params is None:
        params = init_params(cfg.seed, cfg.model_config(), cfg.dtype)
    if state is None:
        state = init_adam_state(params)
    if history is None:
        history = TrainHistory()
    params.requires_grad_(True)

    pairs = [
        (volume_to_tensor(m, cfg.dtype, cfg.hu_rescale), volume_to_tensor(f, cfg.dtype, cfg.hu_rescale))
        for m, f in case_list
    ]

    t0 = time.perf_counter()
    last_good = None
    reason = "max_iters"
    k = len(history.records)
    while k < cfg.max_iters:
        if _plateaued(history.records, cfg.plateau_window, cfg.plateau_tol):
            reason = "plateau"
            break
        mov_t, fix_t = pairs[k % len(pairs)]
        out = register_tensors(params, mov_t, fix_t)
        loss = total_loss(fix_t, out["warped"], out["dvf_full"], cfg.lam, cfg.lcc_window)
        total, lcc_mean, tv_val = loss.floats()
        if not math.isfinite(total):
            reason = f"non_finite_loss at iteration {k}"
            if last_good is not None:
                params = last_good.requires_grad_(True)
            break
        last_good = params.clone()
        loss.total.backward()
        grads = {name: p.grad for name, p in params.tensors.items()}
        try:
            adam_step(params, grads, state, cfg)
        except NonFiniteGradientError as e:
            reason = f"non_finite_gradient at iteration {k}: {e}"
            params = last_good.requires_grad_(True)
            break
        for p in params.tensors.values():
            p.grad = None
        history.records.append((k, total, lcc_mean, tv_val))
        k += 1

    history.wall_time += time.perf_counter() - t0
    history.stopping_reason = reason
    params.requires_grad_(False)
    if metrics_path is not None:
        atomic_write_text(metrics_path, metrics_lines(history))
    return params, history


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointBundle:
    params: ModelParams
    state: AdamState | None
    config: TrainConfig
    history: TrainHistory
    iteration: int


def save_checkpoint(
    params: ModelParams,
    state: AdamState | None,
    cfg: TrainConfig,
    path: str,
    history: TrainHistory | None = None,
) -> None:
    """Binary checkpoint: magic + version line, JSON header, then raw
    little-endian payloads in manifest order (params, then Adam m and v)."""
    history = history or TrainHistory()
    manifest = params.manifest
    header = {
        "arch": asdict(params.config),
        "train_config": asdict(cfg),
        "manifest": [[name, list(shape), dt] for name, shape, dt in manifest],
        "optimizer": {"present": state is not None, "t": state.t if state is not None else 0},
        "iteration": len(history.records),
        "records": history.records,
        "stopping_reason": history.stopping_reason,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{len(header_bytes)}\n".encode("ascii"), header_bytes]
    order = [params.tensors]
    if state is not None:
        order += [state.m, state.v]
    for table in order:
        for (name, shape, dt) in manifest:
            arr = table[name].detach().cpu().numpy()
            blobs.append(np.ascontiguousarray(arr).astype(_NP_DTYPES[dt]).tobytes())
    atomic_write_bytes(path, b"".join(blobs))


def load_checkpoint(path: str, expect: ModelConfig | None = None) -> CheckpointBundle:
    """Read a checkpoint, verifying magic, version and every manifest shape.

    With `expect` given, the stored architecture must match it exactly;
    loading under a different radius/mode/etc. raises CheckpointError.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        magic_line = f.readline().decode("ascii", errors="replace").strip()
        parts = magic_line.split()
        if len(parts) != 2 or parts[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic_line!r})")
        if int(parts[1]) != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {parts[1]}")
        header_len = int(f.readline().decode("ascii").strip())
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()

    arch = ModelConfig(**header["arch"])
    manifest = [(name, tuple(shape), dt) for name, shape, dt in header["manifest"]]
    expected = expected_manifest(arch, manifest[0][2] if manifest else "f32")
    if manifest != expected:
        raise CheckpointError(f"{path}: stored manifest does not match its architecture header")
    if expect is not None and arch != expect:
        raise CheckpointError(
            f"{path}: checkpoint architecture {asdict(arch)} differs from expected {asdict(expect)}"
        )

    opt_present = header["optimizer"]["present"]
    tables = 3 if opt_present else 1
    offset = 0
    loaded: list["OrderedDict[str, torch.Tensor]"] = []
    for _ in range(tables):
        table: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for name, shape, dt in manifest:
            n_bytes = int(np.prod(shape)) * np.dtype(_NP_DTYPES[dt]).itemsize
            chunk = payload[offset : offset + n_bytes]
            if len(chunk) != n_bytes:
                raise CheckpointError(f"{path}: truncated payload at {name}")
            arr = np.frombuffer(chunk, dtype=_NP_DTYPES[dt]).reshape(shape).copy()
            table[name] = torch.from_numpy(arr).to(_TORCH_DTYPES[dt])
            offset += n_bytes
        loaded.append(table)
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")

    params = ModelParams(loaded[0], arch)
    state = AdamState(m=loaded[1], v=loaded[2], t=int(header["optimizer"]["t"])) if opt_present else None
    cfg = config_from_dict(header["train_config"])
    history = TrainHistory(
        records=[tuple(r) for r in header.get("records", [])],
        wall_time=0.0,
        stopping_reason=header.get("stopping_reason", ""),
    )
    return CheckpointBundle(params, state, cfg, history, int(header["iteration"]))


def checkpoint_iteration(path: str) -> int:
    with open(path, "rb") as f:
        f.readline()
        header_len = int(f.readline().decode("ascii").strip())
        header = json.loads(f.read(header_len).decode("utf-8"))
    return int(header["iteration"])
