"""Command-line entry point.

One subcommand per pipeline stage: preprocess, train, register, eval-tre,
synth-bench, gradcheck, bench-costvolume. Exit codes: 0 success, 1 validation
error, 2 numerical failure. Output files are written atomically and every run
with an output directory echoes its fully resolved configuration there.
"""

from __future__ import annotations

import argparse
import os
import resource
import sys
import time
from dataclasses import asdict

import numpy as np
import torch

from . import costvolume as cv
from . import evalkit, gradsuite, rrn, trainer, voldata
from .losses import lcc as compute_lcc

THREADS_ENV = "RRNREG_THREADS"


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_triple(text: str, kind=float) -> tuple:
    parts = [kind(t) for t in text.replace(",", " ").split()]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ValueError(f"expected 1 or 3 values, got {text!r}")
    return tuple(parts)


def _parse_crop(text: str) -> voldata.CropBox:
    lo_text, hi_text = text.split(":")
    return voldata.CropBox(_parse_triple(lo_text, int), _parse_triple(hi_text, int))


def _ensure_outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _echo_config(out_dir: str, entries: dict) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    voldata.atomic_write_text(os.path.join(out_dir, "resolved_config.txt"), "\n".join(lines) + "\n")


def _train_config_from_args(args) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig()
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            cfg = trainer.config_from_dict(trainer.parse_config_text(f.read()), base=cfg)
    overrides = {}
    for key in (
        "lr", "max_iters", "lam", "seed", "radius", "neighborhood", "mode",
        "lcc_window", "plateau_window", "plateau_tol", "precision", "weight_decay",
    ):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return trainer.config_from_dict(overrides, base=cfg)


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> int:
    out_dir = _ensure_outdir(args.out)
    mov = voldata.load_volume(args.moving)
    fix = voldata.load_volume(args.fixed)
    if mov.dims != fix.dims:
        raise ValueError(f"moving {mov.dims} and fixed {fix.dims} dims differ; supply per-case crops upstream")
    source_dims = mov.dims
    source_spacing = fix.spacing

    clip_text = "-1000,-100" if args.paper_scale and args.clip is None else (args.clip or "none")
    clip = None
    if clip_text.lower() != "none":
        lo, hi = (float(t) for t in clip_text.replace(",", " ").split())
        mov, fix = voldata.clip_intensities(mov, lo, hi), voldata.clip_intensities(fix, lo, hi)
        clip = (lo, hi)

    box = None
    if args.crop == "auto":
        box = voldata.lung_crop_heuristic(fix)
    elif args.crop.lower() != "none":
        box = _parse_crop(args.crop)
    if box is not None:
        mov, fix = voldata.crop(mov, box), voldata.crop(fix, box)

    target_text = args.target_dims or ("256" if args.paper_scale else None)
    target = _parse_triple(target_text, int) if target_text else mov.dims
    if args.paper_scale:
        print("paper-scale preset: 256^3 target grid; downstream training at this size needs tens of GB", file=sys.stderr)
    if tuple(target) != mov.dims:
        mov, fix = voldata.resample(mov, target), voldata.resample(fix, target)

    transform = voldata.grid_transform_for(source_dims, box, tuple(target), args.source_tag, args.grid_tag)

    voldata.save_volume(mov, os.path.join(out_dir, "moving.hdr"))
    voldata.save_volume(fix, os.path.join(out_dir, "fixed.hdr"))

    flagged: tuple[int, ...] = ()
    if args.landmarks_moving or args.landmarks_fixed:
        if not (args.landmarks_moving and args.landmarks_fixed):
            raise ValueError("landmark mapping needs both --landmarks-moving and --landmarks-fixed")
        lms = voldata.load_landmarks(
            args.landmarks_moving, args.landmarks_fixed, args.source_tag, source_spacing, dims=source_dims
        )
        mapped = voldata.map_landmarks(lms, transform)
        flagged = mapped.flagged
        voldata.save_landmarks(
            mapped,
            os.path.join(out_dir, "landmarks_moving.txt"),
            os.path.join(out_dir, "landmarks_fixed.txt"),
        )
        if flagged:
            print(f"warning: {len(flagged)} landmark pairs left the target grid: {flagged}", file=sys.stderr)

    _echo_config(
        out_dir,
        {
            "subcommand": "preprocess",
            "moving": args.moving,
            "fixed": args.fixed,
            "clip": clip,
            "crop": box,
            "target_dims": tuple(target),
            "scale": transform.scale,
            "grid_tag": args.grid_tag,
            "flagged_landmarks": list(flagged),
        },
    )
    print(f"preprocessed volumes -> {out_dir} (dims {tuple(target)}, spacing {mov.spacing})")
    return 0


def _load_cases(args) -> list[tuple[voldata.Volume, voldata.Volume]]:
    cases = []
    if getattr(args, "cases", None):
        with open(args.cases, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                mov_path, fix_path = line.split()
                cases.append((voldata.load_volume(mov_path), voldata.load_volume(fix_path)))
    if getattr(args, "moving", None):
        if not getattr(args, "fixed", None):
            raise ValueError("--moving requires --fixed")
        cases.append((voldata.load_volume(args.moving), voldata.load_volume(args.fixed)))
    if not cases:
        raise ValueError("no cases given: use --cases FILE or --moving/--fixed")
    return cases


def cmd_train(args) -> int:
    cfg = _train_config_from_args(args)
    if args.paper_scale:
        print(
            "paper-scale preset: optimizer and loss already use the published values; "
            "256^3 inputs need tens of GB of memory on CPU",
            file=sys.stderr,
        )
    out_dir = _ensure_outdir(args.out)
    cases = _load_cases(args)

    if args.resume:
        bundle = trainer.load_checkpoint(args.resume, expect=cfg.model_config())
        params, state, history = bundle.params, bundle.state, bundle.history
        if state is None:
            state = trainer.init_adam_state(params)
    else:
        params = rrn.init_params(cfg.seed, cfg.model_config(), cfg.dtype)
        state = trainer.init_adam_state(params)
        history = None

    params, history = trainer.train(
        cases, cfg, params=params, state=state, history=history,
        metrics_path=os.path.join(out_dir, "metrics.txt"),
    )
    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    trainer.save_checkpoint(params, state, cfg, ckpt_path, history)
    _echo_config(out_dir, {"subcommand": "train", **asdict(cfg), "cases": len(cases), "resume": args.resume})
    print(f"trained {len(history.records)} iterations, stop: {history.stopping_reason}")
    print(f"checkpoint -> {ckpt_path}")
    return 2 if history.stopping_reason.startswith("non_finite") else 0


def cmd_register(args) -> int:
    out_dir = _ensure_outdir(args.out)
    bundle = trainer.load_checkpoint(args.checkpoint)
    mov = voldata.load_volume(args.moving)
    fix = voldata.load_volume(args.fixed)
    result = rrn.register(bundle.params, mov, fix, hu_rescale=bundle.config.hu_rescale, grid_tag=args.grid_tag)
    voldata.save_dvf(result.dvf_full, os.path.join(out_dir, "dvf_full.dvf"))
    voldata.save_volume(result.warped_moving, os.path.join(out_dir, "warped.hdr"))
    if args.save_levels:
        for d in result.per_level_dvfs:
            voldata.save_dvf(d, os.path.join(out_dir, f"dvf_level{d.level}.dvf"))
    _echo_config(
        out_dir,
        {
            "subcommand": "register",
            "checkpoint": args.checkpoint,
            "moving": args.moving,
            "fixed": args.fixed,
            "grid_tag": args.grid_tag,
            **asdict(bundle.params.config),
        },
    )
    print(f"registered -> {out_dir}")
    return 0


def cmd_eval_tre(args) -> int:
    spacing = _parse_triple(args.spacing, float)
    dims = _parse_triple(args.dims, int) if args.dims else None
    if args.dvf.lower() == "zero":
        if dims is None:
            raise ValueError("--dvf zero requires --dims")
        tag = args.grid_tag or "original"
        d = voldata.zero_dvf(dims, grid_tag=tag)
    else:
        d = voldata.load_dvf(args.dvf)
        tag = args.grid_tag or d.grid_tag or "original"
        if d.grid_tag is None:
            d = voldata.Dvf(d.data, d.level, tag)
    lms = voldata.load_landmarks(args.landmarks_moving, args.landmarks_fixed, tag, spacing, dims=dims)
    report = evalkit.tre(lms, d, spacing, case_id=args.case_id, mode_tag=args.mode_tag or args.dvf)
    print(evalkit.report_table([report]), end="")
    print(f"{args.case_id}: mean {report.mean:.2f} mm, std {report.std:.2f} mm over {report.errors.size} landmarks")
    if args.out:
        out_dir = _ensure_outdir(args.out)
        per_lm = "\n".join(f"{e!r}" for e in report.errors.tolist()) + "\n"
        voldata.atomic_write_text(os.path.join(out_dir, f"{args.case_id}_errors.txt"), per_lm)
        voldata.atomic_write_text(os.path.join(out_dir, f"{args.case_id}_tre.csv"), evalkit.report_csv([report]))
        _echo_config(out_dir, {"subcommand": "eval-tre", "dvf": args.dvf, "case_id": args.case_id, "spacing": spacing})
    return 0


def cmd_synth_bench(args) -> int:
    cfg = _train_config_from_args(args)
    dims = _parse_triple(args.dims, int)
    case = evalkit.make_synthetic_case(dims, args.amplitude, args.smoothness, cfg.seed)
    zero = voldata.zero_dvf(case.gt_dvf.dims, grid_tag=case.gt_dvf.grid_tag)
    epe0_mean, epe0_max = evalkit.epe(zero, case.gt_dvf)
    print(f"synthetic case dims={dims} amplitude={args.amplitude} smoothness={args.smoothness} seed={cfg.seed}")
    print(f"initial mean|max displacement: {epe0_mean:.3f}|{epe0_max:.3f} voxels")

    params = rrn.init_params(cfg.seed, cfg.model_config(), cfg.dtype)
    state = trainer.init_adam_state(params)
    params, history = trainer.train([(case.moving, case.fixed)], cfg, params=params, state=state)
    result = rrn.register(params, case.moving, case.fixed, hu_rescale=cfg.hu_rescale, grid_tag=case.gt_dvf.grid_tag)
    epe_mean, epe_max = evalkit.epe(result.dvf_full, case.gt_dvf)
    fix_t = torch.from_numpy(case.fixed.data).double()
    warped_t = torch.from_numpy(result.warped_moving.data).double()
    lcc_mean = float(compute_lcc(fix_t, warped_t, cfg.lcc_window)) / fix_t.numel()
    print(f"trained {len(history.records)} iterations, stop: {history.stopping_reason}")
    print(
        f"final mean|max EPE: {epe_mean:.3f}|{epe_max:.3f} voxels "
        f"({100 * epe_mean / max(epe0_mean, 1e-9):.1f}% of initial)"
    )
    print(f"similarity(fixed, warped): {lcc_mean:.4f}")

    if args.out:
        out_dir = _ensure_outdir(args.out)
        trainer.save_checkpoint(params, state, cfg, os.path.join(out_dir, "checkpoint.ckpt"), history)
        voldata.save_dvf(result.dvf_full, os.path.join(out_dir, "dvf_pred.dvf"))
        voldata.save_dvf(case.gt_dvf, os.path.join(out_dir, "dvf_gt.dvf"))
        voldata.atomic_write_text(os.path.join(out_dir, "metrics.txt"), trainer.metrics_lines(history))
        _echo_config(
            out_dir,
            {
                "subcommand": "synth-bench",
                **asdict(cfg),
                "dims": dims,
                "amplitude": args.amplitude,
                "smoothness": args.smoothness,
                "epe_initial": epe0_mean,
                "epe_final": epe_mean,
                "lcc": lcc_mean,
            },
        )
    return 2 if history.stopping_reason.startswith("non_finite") else 0


def cmd_gradcheck(args) -> int:
    reports = gradsuite.run_gradient_suite(include_end_to_end=not args.quick)
    print(gradsuite.format_reports(reports))
    return 0 if all(r.passed for r in reports) else 1


def cmd_bench_costvolume(args) -> int:
    dims = _parse_triple(args.dims, int)
    gen = torch.Generator().manual_seed(0)
    a = torch.randn((args.channels,) + dims, generator=gen)
    b = torch.randn((args.channels,) + dims, generator=gen)
    k = cv.neighborhood_offsets(args.radius, args.norm).shape[0]
    cv.correlate(a, b, args.radius, args.norm)  # warm up
    best = float("inf")
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        cv.correlate(a, b, args.radius, args.norm)
        best = min(best, time.perf_counter() - t0)
    voxels = int(np.prod(dims))
    rate = voxels * k / best
    rss_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    print(f"dims={dims} channels={args.channels} radius={args.radius} norm={args.norm} K={k}")
    print(f"best of {args.repeats}: {best * 1e3:.2f} ms, {rate / 1e6:.2f} Mvoxel-offsets/s, peak RSS {rss_mb:.0f} MB")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="rrnreg", description="coarse-to-fine deformable 3D registration")
    parser.add_argument(
        "--threads", type=int, default=None,
        help=f"torch thread count (env {THREADS_ENV}, default all cores)",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("preprocess", help="clip/crop/resample a volume pair and map its landmarks")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip", default=None, help="HU bounds lo,hi or 'none' (default -1000,-100 with --paper-scale, else none)")
    p.add_argument("--crop", default="none", help="'z0,y0,x0:z1,y1,x1', 'auto' or 'none'")
    p.add_argument("--target-dims", dest="target_dims", default=None, help="D,H,W or single int")
    p.add_argument("--landmarks-moving", dest="landmarks_moving", default=None)
    p.add_argument("--landmarks-fixed", dest="landmarks_fixed", default=None)
    p.add_argument("--source-tag", dest="source_tag", default="original")
    p.add_argument("--grid-tag", dest="grid_tag", default="prep")
    p.add_argument("--paper-scale", dest="paper_scale", action="store_true", help="published preprocessing: clip [-1000,-100], 256^3 grid")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="instance-optimize the model over one or more volume pairs")
    _add_train_flags(p)
    p.add_argument("--cases", default=None, help="text file: one 'moving fixed' path pair per line")
    p.add_argument("--moving", default=None)
    p.add_argument("--fixed", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--paper-scale", dest="paper_scale", action="store_true", help="warn about full-scale memory; published hyperparameters are the defaults")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="apply a trained checkpoint to a volume pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-tag", dest="grid_tag", default="prep")
    p.add_argument("--save-levels", dest="save_levels", action="store_true")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval-tre", help="landmark target registration error for a field (or 'zero')")
    p.add_argument("--dvf", required=True, help="field path or 'zero'")
    p.add_argument("--landmarks-moving", dest="landmarks_moving", required=True)
    p.add_argument("--landmarks-fixed", dest="landmarks_fixed", required=True)
    p.add_argument("--spacing", required=True, help="mm per axis, z,y,x")
    p.add_argument("--dims", default=None, help="grid dims D,H,W (required for --dvf zero)")
    p.add_argument("--grid-tag", dest="grid_tag", default=None)
    p.add_argument("--case-id", dest="case_id", default="case")
    p.add_argument("--mode-tag", dest="mode_tag", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval_tre)

    p = sub.add_parser("synth-bench", help="train on a synthetic case and report endpoint error")
    _add_train_flags(p)
    p.add_argument("--dims", default="32")
    p.add_argument("--amplitude", type=float, default=4.0)
    p.add_argument("--smoothness", type=float, default=8.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_synth_bench)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all operators")
    p.add_argument("--quick", action="store_true", help="skip the end-to-end check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-costvolume", help="cost-volume throughput and memory")
    p.add_argument("--dims", default="48")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--norm", default="l1", choices=list(cv.NEIGHBORHOOD_NORMS))
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench_costvolume)

    return parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--radius", type=int, default=None)
    p.add_argument("--neighborhood", choices=list(cv.NEIGHBORHOOD_NORMS), default=None)
    p.add_argument("--mode", choices=list(rrn.MODES), default=None)
    p.add_argument("--lcc-window", dest="lcc_window", type=int, default=None)
    p.add_argument("--plateau-window", dest="plateau_window", type=int, default=None)
    p.add_argument("--plateau-tol", dest="plateau_tol", type=float, default=None)
    p.add_argument("--precision", choices=["single", "double"], default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, os.cpu_count() or 1))
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError, trainer.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
