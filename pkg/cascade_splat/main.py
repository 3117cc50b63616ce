"""Command-line pipeline: gen -> flow -> segment -> train -> render / eval, plus window sweeps and baseline comparisons."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import multiprocessing
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import pandas as pd
import torch
from tqdm import tqdm

from cascade_splat.splat_utils import config
from cascade_splat.splat_utils.config import RunConfig, load_run_config
from cascade_splat.splat_utils.errors import SplatError, UsageError
from cascade_splat.splat_utils.flow import (
    FlowSeries,
    estimate_flow_proxy,
    flow_curve,
    read_flow_file,
    summarize_flow,
    write_flow_file,
)
from cascade_splat.splat_utils.geometry import Camera
from cascade_splat.splat_utils.imageio import write_image
from cascade_splat.splat_utils.scenes import (
    MOTION_PRESETS,
    DatasetFrame,
    SyntheticSceneSpec,
    generate_synthetic,
    load_dataset,
    select_split,
)
from cascade_splat.splat_utils.stats import aggregate_eval, best_per_method, compare_summary, eval_table_with_mean
from cascade_splat.splat_utils.training import evaluate, load_state, render_at, train
from cascade_splat.splat_utils.windows import (
    WindowSet,
    build_windows,
    read_windows_file,
    window_table,
    write_windows_file,
)

logger = logging.getLogger(__name__)


def _save_config(cfg: RunConfig, out_dir: Path) -> None:
    cfg.save(Path(out_dir) / "config.json")


def _load_frames(manifest: Path, auto_split: bool = False) -> list[DatasetFrame]:
    return load_dataset(Path(manifest), auto_split=auto_split)


def _resolve_windows(args: argparse.Namespace, cfg: RunConfig, frames: list[DatasetFrame]) -> WindowSet | None:
    """Windows from --windows, else built from --flow and the windows config section."""
    if getattr(args, "windows", None):
        return read_windows_file(args.windows)
    method = cfg.windows.method
    if method is None:
        if cfg.field.segment_heads:
            raise UsageError("segment heads are enabled: pass --windows FILE or set windows.method")
        return None
    flow = None
    if method != "equal":
        if not getattr(args, "flow", None):
            raise UsageError(f"window method '{method}' needs --flow")
        flow = read_flow_file(args.flow, timestamps=[f.t for f in frames])
    return build_windows(method, cfg.windows.count, flow)


def cmd_gen(args: argparse.Namespace, cfg: RunConfig) -> int:
    spec = SyntheticSceneSpec(
        gaussian_count=args.gaussians,
        motion=args.motion,
        frame_count=args.frames,
        resolution=(args.width, args.height),
        orbit_degrees=args.orbit_degrees,
        seed=cfg.seed,
        sh_degree=cfg.render.sh_degree,
    )
    out_dir = Path(args.out)
    _save_config(cfg, out_dir)
    manifest = generate_synthetic(spec, out_dir, cfg.render, progress=not args.no_progress)
    print(f"Wrote {spec.frame_count} frames ({spec.motion}) to {manifest}")
    return 0


def cmd_flow(args: argparse.Namespace, cfg: RunConfig) -> int:
    frames = _load_frames(args.manifest)
    flow = estimate_flow_proxy(
        [f.image for f in frames],
        block_size=cfg.flow.block_size,
        search_radius=cfg.flow.search_radius,
        timestamps=[f.t for f in frames],
    )
    out = Path(args.out)
    write_flow_file(out, flow)
    curve_path = Path(args.curve) if args.curve else out.with_suffix(".csv")
    flow_curve(flow).to_csv(curve_path, index=False)
    _save_config(cfg, out.parent)

    summary = summarize_flow(flow)
    print(f"Flow over {summary['pairs']} frame pairs written to {out}")
    print(f"  mean {summary['mean']:.4f}  max {summary['max']:.4f}  std {summary['std']:.4f}")
    peaks = ", ".join(f"pair {p} (t={t:.4f})" for p, t in zip(summary["peak_pairs"], summary["peak_times"]))
    print(f"  peaks: {peaks or 'none'}")
    print(f"  curve: {curve_path}")
    return 0


def cmd_segment(args: argparse.Namespace, cfg: RunConfig) -> int:
    method = args.method or cfg.windows.method or "equal"
    count = args.count if args.count is not None else cfg.windows.count
    if count < 1:
        raise UsageError(f"window count must be >= 1, got {count}")
    flow: FlowSeries | None = None
    if args.flow:
        flow = read_flow_file(args.flow)
    elif method != "equal":
        raise UsageError(f"window method '{method}' needs --flow")
    windows = build_windows(method, count, flow)
    out = Path(args.out)
    write_windows_file(out, windows)
    _save_config(replace(cfg, windows=replace(cfg.windows, method=method, count=count)), out.parent)

    print(f"{windows.count} windows ({method}) written to {out}")
    print(window_table(windows, flow).to_string(index=False))
    if flow is not None:
        summary = summarize_flow(flow)
        print(f"  flow peaks at t = {', '.join(f'{t:.4f}' for t in summary['peak_times']) or 'none'}")
    return 0


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    frames = _load_frames(args.manifest, auto_split=args.auto_split)
    out_dir = Path(args.out)
    windows = None if args.resume else _resolve_windows(args, cfg, frames)
    _save_config(cfg, out_dir)
    if windows is not None:
        write_windows_file(out_dir / "windows.txt", windows)
    result = train(
        frames,
        cfg,
        windows=windows,
        out_dir=out_dir,
        resume=Path(args.resume) if args.resume else None,
        progress=not args.no_progress,
    )
    print(f"Trained {result.state.iteration} iterations, {len(result.state.model)} Gaussians")
    if not result.metrics.empty:
        last = result.metrics.iloc[-1]
        print(f"  final: loss {last['loss']:.5f}  psnr {last['psnr']:.3f} dB  ssim {last['ssim']:.4f}")
    print(f"  checkpoint: {result.checkpoint_path}")
    return 0


def _parse_times(values: Sequence[str]) -> list[float]:
    times = []
    for text in values:
        try:
            t = float(text)
        except ValueError as exc:
            raise UsageError(f"time {text!r} is not a number") from exc
        if not 0.0 <= t <= 1.0:
            raise UsageError(f"time {t} is outside [0, 1]")
        times.append(t)
    return times


def _render_camera(args: argparse.Namespace) -> Camera:
    try:
        with open(args.camera, "r", encoding="utf-8") as fp:
            data: dict[str, Any] = json.load(fp)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read camera file {args.camera}: {exc}") from exc
    if "cameras" in data:
        cameras = data["cameras"]
        name = args.camera_name or sorted(cameras)[0]
        if name not in cameras:
            raise UsageError(f"camera {name!r} is not in {args.camera}")
        data = cameras[name]
    try:
        return Camera.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid camera in {args.camera}: {exc}") from exc


def cmd_render(args: argparse.Namespace, cfg: RunConfig) -> int:
    times = _parse_times(args.t)
    camera = _render_camera(args)
    state = load_state(Path(args.checkpoint), timestamps=times)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _save_config(state.config, out_dir)
    with torch.no_grad():
        for i, t in enumerate(times):
            framebuffer, _ = render_at(state, camera, t)
            path = out_dir / f"render_{i:03d}.{args.format}"
            write_image(path, framebuffer.image())
            print(f"t={t:.6f} -> {path}")
    return 0


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    frames = select_split(_load_frames(args.manifest, auto_split=args.auto_split), args.split)
    if not frames:
        raise UsageError(f"split '{args.split}' has no frames")
    state = load_state(Path(args.checkpoint), timestamps=[f.t for f in frames])
    table = evaluate(state, frames)
    summary = aggregate_eval(table)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    eval_table_with_mean(table).to_csv(out, index=False)
    _save_config(state.config, out.parent)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(
        f"mean over {summary['frames']} frames: psnr {summary['psnr']:.3f} dB  ssim {summary['ssim']:.4f}  "
        f"ms-ssim {summary['ms_ssim']:.4f}  {summary['fps']:.2f} frames/s"
    )
    return 0


def _sweep_cases(cfg: RunConfig, methods: Sequence[str], counts: Sequence[int], qs: Sequence[float]) -> list[dict[str, Any]]:
    cases = [{"method": m, "count": n, "q": cfg.windows.q} for m, n in itertools.product(methods, counts)]
    if "equal" in methods:
        cases += [{"method": "equal", "count": cfg.windows.count, "q": q} for q in qs if q != cfg.windows.q]
    return cases


def _run_sweep_case(task: tuple[dict[str, Any], RunConfig, list[DatasetFrame], FlowSeries | None, Path]) -> dict[str, Any]:
    case, cfg, frames, flow, out_dir = task
    cfg = replace(cfg, windows=replace(cfg.windows, method=case["method"], count=case["count"], q=case["q"]))
    windows = build_windows(case["method"], case["count"], flow)
    run_dir = out_dir / f"{case['method']}_n{case['count']}_q{case['q']}"
    _save_config(cfg, run_dir)
    result = train(frames, cfg, windows=windows, out_dir=run_dir, progress=False)
    scores = aggregate_eval(evaluate(result.state, select_split(frames, "val") or select_split(frames, "train")))
    return {**case, "psnr": scores["psnr"], "ssim": scores["ssim"], "ms_ssim": scores["ms_ssim"], "fps": scores["fps"]}


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig) -> int:
    frames = _load_frames(args.manifest, auto_split=args.auto_split)
    methods = args.methods or list(config.WINDOW_METHODS)
    unknown = sorted(set(methods) - set(config.WINDOW_METHODS))
    if unknown:
        raise UsageError(f"unknown window method '{unknown[0]}'")
    flow = None
    if any(m != "equal" for m in methods):
        if not args.flow:
            raise UsageError("dynamic window methods need --flow")
        flow = read_flow_file(args.flow, timestamps=[f.t for f in frames])
    out_dir = Path(args.out)
    _save_config(cfg, out_dir)

    cases = _sweep_cases(cfg, methods, args.counts or config.SWEEP_COUNTS, args.qs or config.SWEEP_QS)
    tasks = [(case, cfg, frames, flow, out_dir) for case in cases]
    rows: list[dict[str, Any]] = []
    proc_count = args.processes or 1
    with tqdm(total=len(tasks), desc="Sweeping", unit="run", file=sys.stdout, dynamic_ncols=True) as pbar:
        if proc_count == 1:
            for task in tasks:
                rows.append(_run_sweep_case(task))
                pbar.update(1)
        else:
            # torch does not survive fork after its thread pools start
            with multiprocessing.get_context("spawn").Pool(processes=proc_count, maxtasksperchild=1) as pool:
                for row in pool.imap(_run_sweep_case, tasks, chunksize=1):
                    rows.append(row)
                    pbar.update(1)

    table = pd.DataFrame(rows)
    table.to_csv(out_dir / "sweep.csv", index=False)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print("Best per method:")
    print(best_per_method(table).to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0


def _run_compare_seed(task: tuple[int, RunConfig, SyntheticSceneSpec, str, int, Path]) -> dict[str, Any]:
    """Train the cascaded model and the frame-only baseline on one generated scene."""
    seed, cfg, spec, method, count, out_dir = task
    root = out_dir / f"seed{seed}"
    frames = load_dataset(generate_synthetic(replace(spec, seed=seed), root / "data", cfg.render, progress=False))
    flow = estimate_flow_proxy(
        [f.image for f in frames],
        block_size=cfg.flow.block_size,
        search_radius=cfg.flow.search_radius,
        timestamps=[f.t for f in frames],
    )
    held_out = select_split(frames, "val") or select_split(frames, "train")
    arms = (
        ("cascade", True, build_windows(method, count, flow)),
        ("frame_only", False, None),
    )
    row: dict[str, Any] = {"seed": seed}
    for name, segment_heads, windows in arms:
        run_cfg = replace(cfg, field=replace(cfg.field, segment_heads=segment_heads), seed=seed)
        _save_config(run_cfg, root / name)
        result = train(frames, run_cfg, windows=windows, out_dir=root / name, progress=False)
        row[f"psnr_{name}"] = aggregate_eval(evaluate(result.state, held_out, with_ms_ssim=False))["psnr"]
    row["gain"] = row["psnr_cascade"] - row["psnr_frame_only"]
    return row


def cmd_compare(args: argparse.Namespace, cfg: RunConfig) -> int:
    method = args.method or cfg.windows.method or "threshold"
    count = args.count if args.count is not None else cfg.windows.count
    if count < 1:
        raise UsageError(f"window count must be >= 1, got {count}")
    spec = SyntheticSceneSpec(
        gaussian_count=args.gaussians,
        motion=args.motion,
        frame_count=args.frames,
        resolution=(args.width, args.height),
        sh_degree=cfg.render.sh_degree,
    )
    spec.validate()
    out_dir = Path(args.out)
    _save_config(cfg, out_dir)

    seeds = args.seeds if args.seeds is not None else list(config.COMPARE_SEEDS)
    tasks = [(seed, cfg, spec, method, count, out_dir) for seed in seeds]
    rows: list[dict[str, Any]] = []
    proc_count = args.processes or 1
    with tqdm(total=len(tasks), desc="Comparing", unit="seed", file=sys.stdout, disable=args.no_progress) as pbar:
        if proc_count == 1:
            for task in tasks:
                rows.append(_run_compare_seed(task))
                pbar.update(1)
        else:
            with multiprocessing.get_context("spawn").Pool(processes=proc_count, maxtasksperchild=1) as pool:
                for row in pool.imap(_run_compare_seed, tasks, chunksize=1):
                    rows.append(row)
                    pbar.update(1)

    table = pd.DataFrame(rows, columns=["seed", "psnr_cascade", "psnr_frame_only", "gain"])
    table.to_csv(out_dir / "compare.csv", index=False)
    summary = compare_summary(table)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(
        f"median over {summary['seeds']} seeds: cascade {summary['psnr_cascade']:.3f} dB  "
        f"frame-only {summary['psnr_frame_only']:.3f} dB  gain {summary['median_gain']:+.3f} dB  "
        f"({summary['wins']} wins)"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON config file (overrides built-in defaults)")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value; repeatable, wins over --config",
    )
    common.add_argument(
        "--log-level",
        default="warning",
        choices=["debug", "info", "warning", "error"],
        help="Library log level (defaults to warning)",
    )

    parser = argparse.ArgumentParser(description="Cascaded temporal-residue Gaussian splatting on the CPU")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="Render a synthetic dynamic scene")
    p.add_argument("-o", "--out", required=True, help="Output dataset directory")
    p.add_argument("--motion", choices=MOTION_PRESETS, default="two_burst")
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--gaussians", type=int, default=200)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--orbit-degrees", type=float, default=12.0, help="Camera sweep across the clip (0 = fixed)")
    p.add_argument("--no-progress", action="store_true")
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("flow", parents=[common], help="Estimate per-frame-pair motion with block matching")
    p.add_argument("-m", "--manifest", required=True)
    p.add_argument("-o", "--out", required=True, help="Flow file to write")
    p.add_argument("--curve", default=None, help="Plot-ready CSV of the flow curve (defaults next to --out)")
    p.set_defaults(handler=cmd_flow)

    p = sub.add_parser("segment", parents=[common], help="Build temporal windows")
    p.add_argument("--flow", default=None, help="Flow file (required for nhighest/threshold)")
    p.add_argument("--method", choices=config.WINDOW_METHODS, default=None)
    p.add_argument("-n", "--count", type=int, default=None)
    p.add_argument("-o", "--out", required=True, help="Windows file to write")
    p.set_defaults(handler=cmd_segment)

    p = sub.add_parser("train", parents=[common], help="Optimize Gaussians and the deformation field")
    p.add_argument("-m", "--manifest", required=True)
    p.add_argument("-o", "--out", required=True, help="Output run directory")
    p.add_argument("--windows", default=None, help="Windows file from 'segment'")
    p.add_argument("--flow", default=None, help="Flow file, used with windows.method")
    p.add_argument("--resume", default=None, help="Checkpoint to resume from")
    p.add_argument("--auto-split", action="store_true", help="Train on every 4th frame, validate midway")
    p.add_argument("--no-progress", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("render", parents=[common], help="Render a checkpoint at given times")
    p.add_argument("-c", "--checkpoint", required=True)
    p.add_argument("--camera", required=True, help="Camera JSON, or a dataset manifest")
    p.add_argument("--camera-name", default=None, help="Camera to use when --camera is a manifest")
    p.add_argument("--t", nargs="+", required=True, help="Normalized times in [0, 1]")
    p.add_argument("-o", "--out", required=True, help="Output image directory")
    p.add_argument("--format", choices=["ppm", "pf"], default="ppm")
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="Score a checkpoint against a dataset split")
    p.add_argument("-c", "--checkpoint", required=True)
    p.add_argument("-m", "--manifest", required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--auto-split", action="store_true")
    p.add_argument("-o", "--out", required=True, help="CSV of per-frame metrics")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="Train one model per window method / count / q")
    p.add_argument("-m", "--manifest", required=True)
    p.add_argument("--flow", default=None)
    p.add_argument("--methods", nargs="+", default=None)
    p.add_argument("--counts", nargs="+", type=int, default=None)
    p.add_argument("--qs", nargs="+", type=float, default=None)
    p.add_argument("--auto-split", action="store_true")
    p.add_argument("-p", "--processes", type=int, default=None, help="Worker processes (defaults to 1)")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("compare", parents=[common], help="Cascaded model vs frame-only baseline over seeds")
    p.add_argument("--seeds", nargs="+", type=int, default=None)
    p.add_argument("--method", choices=config.WINDOW_METHODS, default=None, help="Window method (defaults to threshold)")
    p.add_argument("-n", "--count", type=int, default=None)
    p.add_argument("--motion", choices=MOTION_PRESETS, default="two_burst")
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--gaussians", type=int, default=200)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("-p", "--processes", type=int, default=None, help="Worker processes (defaults to 1)")
    p.add_argument("--no-progress", action="store_true")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(handler=cmd_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.overrides)
        return args.handler(args, cfg)
    except SplatError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
