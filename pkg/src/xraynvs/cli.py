"""Command-line orchestration of the full pipeline.

Subcommands: ``phantom``, ``views`` (fibonacci | arc), ``render``,
``dataset``, ``train``, ``sample``, ``eval``. Exit codes: 0 success, 1 usage
error, 2 runtime failure; all diagnostics go to stderr. Every run echoes its
resolved options to a ``run.meta`` JSON next to (or inside) its output so a
run is reproducible from that file alone. Angles are degrees on the command
line and radians everywhere inside.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

import xraynvs
from xraynvs.diffusion import dpm_solver_sample, make_schedule
from xraynvs.drr import DetectorSpec, normalize_image, render_drr
from xraynvs.imgio import load_png16, save_png16
from xraynvs.metrics import evaluate_set
from xraynvs.nn.model import load_checkpoint, make_denoiser, save_checkpoint
from xraynvs.train import (
    Codec,
    FROM_CHECKPOINT,
    build_dataset,
    load_stage_file,
    manifest_from_poses,
    model_config_for_stage,
    read_manifest,
    train_stage,
    weak_to_strong_init,
    write_manifest,
)
from xraynvs.viewgeom import fibonacci_hemisphere, pa_pose, pose_from_angles, simple_arc_views
from xraynvs.voxel import hu_to_mu, load_volume, make_phantom, save_volume


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors on exit code 1 (2 is for runtime failures)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v != ""]


def _parse_angle_pair(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"expected 'azimuth,elevation' degrees, got {text!r}")
    return float(parts[0]), float(parts[1])


def write_run_meta(subcommand: str, args: argparse.Namespace, out_hint: str) -> str:
    """Echo resolved options to run.meta under/next to the output target."""
    options = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    meta = {"tool": "xraynvs", "version": xraynvs.__version__, "subcommand": subcommand, "options": options}
    if os.path.isdir(out_hint):
        path = os.path.join(out_hint, "run.meta")
    else:
        path = out_hint + ".run.meta"
    with open(path, "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2, default=str)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    vol = make_phantom(args.seed, (args.n, args.n, args.n))
    sidecar = save_volume(vol, args.out)
    write_run_meta("phantom", args, sidecar)
    print(sidecar)
    return 0


def cmd_views(args) -> int:
    if args.kind == "fibonacci":
        poses = fibonacci_hemisphere(args.n, args.radius)
        manifest = manifest_from_poses(poses, source_index=0)
    else:
        poses = simple_arc_views(args.step_deg, args.radius)
        manifest = manifest_from_poses(poses, source_index=None)
    write_manifest(args.out, manifest)
    write_run_meta("views", args, args.out)
    print(f"wrote {len(poses)} views to {args.out}")
    return 0


def cmd_render(args) -> int:
    vol = load_volume(args.volume)
    if vol.value_kind == "hounsfield":
        vol = hu_to_mu(vol)
    manifest = read_manifest(args.views)
    os.makedirs(args.out, exist_ok=True)
    radius = manifest.records[0].radius_m if manifest.records else 1.8
    n = 0
    for res in args.resolutions:
        det = DetectorSpec.for_resolution(res, source_to_detector_mm=2.0 * radius * 1000.0)
        res_dir = os.path.join(args.out, str(res))
        os.makedirs(res_dir, exist_ok=True)
        for rec in manifest.records:
            img = normalize_image(render_drr(vol, rec.pose(), det))
            save_png16(os.path.join(res_dir, rec.image_name()), img)
            n += 1
    write_run_meta("render", args, args.out)
    print(f"rendered {n} images under {args.out}")
    return 0


def cmd_dataset(args) -> int:
    manifest = build_dataset(
        n_volumes=args.n,
        n_views=args.views,
        resolutions=args.resolutions,
        radius_m=args.radius,
        seed=args.seed,
        out_dir=args.out,
    )
    write_run_meta("dataset", args, args.out)
    print(f"dataset: {len(manifest.volumes)} volumes x {len(manifest.records) // max(len(manifest.volumes), 1)} views "
          f"at {manifest.resolutions} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    model_fields, stages = load_stage_file(args.config)
    if not 0 <= args.stage < len(stages):
        raise ValueError(f"stage index {args.stage} out of range (config has {len(stages)})")
    stage = stages[args.stage]
    manifest = read_manifest(args.views)
    os.makedirs(args.out, exist_ok=True)

    params_in = None
    if stage.init == FROM_CHECKPOINT:
        if not args.checkpoint:
            raise ValueError("stage init=from_checkpoint_with_pos_interp needs --checkpoint")
        params_lr, cfg_lr, _ = load_checkpoint(args.checkpoint)
        params_in, _ = weak_to_strong_init(params_lr, cfg_lr, stage.grid)

    trace_path = os.path.join(args.out, f"stage{args.stage}_trace.csv")
    params, trace = train_stage(stage, manifest, model_fields, params_in=params_in, trace_path=trace_path)
    cfg = model_config_for_stage(stage, model_fields)
    ckpt_path = os.path.join(args.out, f"stage{args.stage}.ckpt")
    codec = manifest.codec()
    save_checkpoint(ckpt_path, params, cfg, codec={"factor": codec.factor, "shift": codec.shift, "scale": codec.scale})
    write_run_meta("train", args, args.out)
    final = trace[-1][1] if trace else float("nan")
    print(f"stage {args.stage}: {stage.steps} steps, final loss {final:.6f}, checkpoint {ckpt_path}")
    return 0


def sample_command(
    checkpoint: str,
    source_image: str,
    targets: list[tuple[float, float, str]],
    steps: int,
    cfg_scale: float,
    seed: int,
    out_dir: str,
    radius_m: float = 1.8,
) -> list[str]:
    """Generate novel views from one source image with the trained model.

    targets are (azimuth_deg, elevation_deg, filename) triples. For each, the
    condition is the relative encoding from the PA source pose to the target
    pose; sampling is 2nd-order DPM-Solver from a seeded unit-normal latent.
    The decoded latent is already in image units (the codec inverts exactly),
    so normalization for writing clips to the valid [0, 1] range; min-max
    restretching would let single outlier pixels set the whole contrast.
    """
    from xraynvs.train import make_condition_bundle
    from xraynvs.viewgeom import relative_view_encoding

    params, cfg, codec_rec = load_checkpoint(checkpoint)
    if codec_rec is None:
        raise ValueError(f"{checkpoint}: checkpoint carries no codec record; re-train or add one")
    codec = Codec(factor=int(codec_rec["factor"]), shift=float(codec_rec["shift"]), scale=float(codec_rec["scale"]))

    src = load_png16(source_image)
    expected = cfg.latent_side * codec.factor
    if src.shape != (expected, expected):
        raise ValueError(f"source image is {src.shape}, checkpoint stage expects {expected}x{expected}")

    schedule = make_schedule()
    denoiser = make_denoiser(params, cfg)
    source_pose = pa_pose(radius_m)
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for az_deg, el_deg, name in targets:
        tgt = pose_from_angles(math.radians(az_deg), math.radians(el_deg), radius_m)
        enc = relative_view_encoding(source_pose, tgt)
        bundle = make_condition_bundle(params, cfg, codec, src, enc)
        z_T = rng.standard_normal((cfg.latent_channels, cfg.latent_side, cfg.latent_side))
        z = dpm_solver_sample(denoiser, z_T, bundle, steps=steps, scale=cfg_scale, s=schedule, order=2)
        img = np.clip(codec.decode(z), 0.0, 1.0)
        path = os.path.join(out_dir, name)
        save_png16(path, img)
        written.append(path)
    return written


def cmd_sample(args) -> int:
    targets: list[tuple[float, float, str]] = []
    if args.target:
        for spec in args.target:
            az, el = _parse_angle_pair(spec)
            targets.append((az, el, f"target_az{az:+.2f}_el{el:+.2f}.png"))
    if args.views:
        manifest = read_manifest(args.views)
        for rec in manifest.records:
            if rec.is_source:
                continue
            targets.append((math.degrees(rec.azimuth_rad), math.degrees(rec.elevation_rad), rec.image_name()))
    if not targets:
        raise ValueError("no targets: pass --target az,el (repeatable) and/or --views manifest")
    written = sample_command(
        checkpoint=args.checkpoint,
        source_image=args.source,
        targets=targets,
        steps=args.steps,
        cfg_scale=args.cfg,
        seed=args.seed,
        out_dir=args.out,
        radius_m=args.radius,
    )
    write_run_meta("sample", args, args.out)
    print(f"wrote {len(written)} samples to {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = read_manifest(args.views)
    if len(args.resolutions) != 1:
        raise ValueError("eval needs exactly one resolution (--resolutions N)")
    bound = manifest.at_resolution(args.resolutions[0])
    bound.records = [r for r in bound.records if not r.is_source]
    # arc manifests keep every view in the x-z plane (azimuth 0 or pi)
    on_arc = all(min(abs(r.azimuth_rad), abs(r.azimuth_rad - math.pi)) < 1e-9 for r in bound.records)
    view_set = "simple" if on_arc else "hemisphere"
    report = evaluate_set(args.pred, args.gt, bound, view_set=view_set)
    report.write_csv(args.metrics)
    write_run_meta("eval", args, args.metrics)
    print(report.summary_line())
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="xraynvs", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[], help="generate a procedural CT-like phantom volume")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=48, help="voxels per side")
    p.add_argument("--out", required=True, help="output volume path (.vol.json)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("views", help="write a view manifest")
    p.add_argument("kind", choices=["fibonacci", "arc"])
    p.add_argument("--n", type=int, default=1500, help="fibonacci: number of views")
    p.add_argument("--step-deg", type=float, default=5.0, help="arc: azimuth step in degrees")
    p.add_argument("--radius", type=float, default=1.8, help="hemisphere radius in metres")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_views)

    p = sub.add_parser("render", help="render DRRs of a volume for a view manifest")
    p.add_argument("--volume", required=True)
    p.add_argument("--views", required=True, help="view manifest path")
    p.add_argument("--resolutions", type=_parse_int_list, default=[64])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("dataset", help="build a phantom DRR training dataset")
    p.add_argument("--n", type=int, default=4, help="number of phantom volumes")
    p.add_argument("--views", type=int, default=64, help="hemisphere views per volume")
    p.add_argument("--resolutions", type=_parse_int_list, default=[32])
    p.add_argument("--radius", type=float, default=1.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="run one training stage from a stage config")
    p.add_argument("--config", required=True, help="stage configuration JSON")
    p.add_argument("--stage", type=int, default=0)
    p.add_argument("--views", required=True, help="dataset manifest path")
    p.add_argument("--checkpoint", help="input checkpoint for weak-to-strong init")
    p.add_argument("--seed", type=int, default=None, help="ignored; stage seed comes from the config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="synthesize novel views from a source image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source view PNG (the PA image)")
    p.add_argument("--target", action="append", help="azimuth,elevation in degrees (repeatable)")
    p.add_argument("--views", help="view manifest: sample every non-source record")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--cfg", type=float, default=3.0, help="classifier-free guidance scale")
    p.add_argument("--radius", type=float, default=1.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="PSNR/SSIM of predictions against dataset ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted PNGs")
    p.add_argument("--gt", required=True, help="dataset root directory")
    p.add_argument("--views", required=True, help="dataset manifest path")
    p.add_argument("--resolutions", type=_parse_int_list, default=[32])
    p.add_argument("--metrics", required=True, help="output CSV path")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return int(args.func(args) or 0)
    except Exception as e:  # runtime failure: report and exit 2
        print(f"xraynvs: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
