"""Command-line entry point.

Subcommands:
  pretrain   run the self-supervised training loop on a dataset directory
  render     render a checkpoint's predicted Gaussians for a scene to PNG
  gradcheck  finite-difference verification of all backward passes
  overfit    optimize raw Gaussians directly against a synthetic scene
  synth      write a synthetic toy dataset (for smoke tests and demos)

Exit codes: 0 success, 1 verification failure, 2 input error.  Every
command is deterministic under a fixed --seed and writes its resolved
configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import losses, scene_io, trainer, verify
from .camera import back_project, merge_clouds
from .scene_io import list_scene_dirs, load_scene
from .splat_render import RenderOptions, rasterize_forward, render_reference
from .synthetic import make_toy_scene
from .trainer import METRICS_HEADER, TrainConfig

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_INPUT_ERROR = 2


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"resolution must look like 320x240, got {text!r}"
        ) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointsplat",
        description="Self-supervised point-cloud pretraining via Gaussian splatting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run the pre-training loop")
    p.add_argument("--data", required=True, help="dataset directory of scenes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--mask-ratio", type=float, default=0.5)
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--interval", type=int, default=5)
    p.add_argument("--resolution", type=_parse_resolution, default=None,
                   help="input resolution WxH (default 320x240)")
    p.add_argument("--k", type=int, default=1, help="Gaussians per point")
    p.add_argument("--lambda", dest="loss_lambda", type=float, default=0.05)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--dump-every", type=int, default=0,
                   help="render dump period in steps (0 = end of run only)")

    p = sub.add_parser("render", help="render a checkpoint for a scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="one scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--anchor", type=int, default=None,
                   help="anchor frame id (default: first valid)")
    p.add_argument("--reference", action="store_true",
                   help="use the brute-force reference renderer")
    p.add_argument("--depth", action="store_true",
                   help="also write 16-bit depth PNGs (millimetres)")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=verify.REL_TOL)

    p = sub.add_parser("overfit", help="direct Gaussian overfit harness")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--gaussians", type=int, default=512)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--min-psnr", type=float, default=None,
                   help="fail (exit 1) if the final PSNR is below this")
    p.add_argument("--self-target", action="store_true",
                   help="use the initial render itself as the target")

    p = sub.add_parser("synth", help="write a synthetic toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--resolution", type=_parse_resolution, default=(64, 48))
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _write_png(path: Path, image: np.ndarray):
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def _write_depth_png(path: Path, depth: np.ndarray):
    data = np.round(np.clip(depth, 0.0, 65.535) * 1000.0).astype(np.uint16)
    Image.fromarray(data).save(path)


def cmd_pretrain(args) -> int:
    scene_dirs = list_scene_dirs(args.data)
    if not scene_dirs:
        print(f"error: no scene directories under {args.data}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    resolution = args.resolution
    config = TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        mask_ratio=args.mask_ratio,
        views=args.views,
        frame_interval=args.interval,
        loss_lambda=args.loss_lambda,
        k=args.k,
        seed=args.seed,
        image_width=resolution[0] if resolution else 320,
        image_height=resolution[1] if resolution else 240,
        threads=args.threads,
    )
    scenes = [
        load_scene(d, resolution=(config.image_width, config.image_height))
        for d in scene_dirs
    ]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(config.to_json())
    render_dir = out_dir / "renders"
    render_dir.mkdir(exist_ok=True)

    net = losses.default_perceptual_net()
    losses.save_perceptual_net(net, out_dir / "perceptual_net.bin")
    state = trainer.init_train_state(config)
    batches = [
        scenes[i : i + config.batch_size]
        for i in range(0, len(scenes), config.batch_size)
    ]
    total_steps = config.epochs * len(batches)

    metrics_path = out_dir / "metrics.csv"
    with metrics_path.open("w") as metrics_file:
        metrics_file.write(METRICS_HEADER + "\n")
        for epoch in range(config.epochs):
            for batch in batches:
                state, metrics = trainer.train_step(
                    state, batch, config, state.rng, total_steps, net
                )
                metrics_file.write(metrics.csv_row() + "\n")
                dump = args.dump_every and state.step % args.dump_every == 0
                if dump and metrics.sample_render is not None:
                    _write_png(
                        render_dir / f"step_{state.step:06d}.png",
                        metrics.sample_render,
                    )
    scene_io.save_checkpoint(state, out_dir / "checkpoint.bin", config,
                             net_id=net.net_id)
    print(f"trained {state.step} steps; outputs in {out_dir}")
    return EXIT_OK


def cmd_render(args) -> int:
    ckpt = scene_io.load_checkpoint(args.checkpoint)
    config = dataclasses.replace(ckpt.config, threads=args.threads)
    scene = load_scene(
        args.data, resolution=(config.image_width, config.image_height)
    )
    anchors = scene_io.valid_anchor_ids(scene, config.frame_interval)
    if not anchors:
        print(
            f"error: scene has no frame pair with gap {config.frame_interval}",
            file=sys.stderr,
        )
        return EXIT_INPUT_ERROR
    anchor = args.anchor if args.anchor is not None else anchors[0]
    if anchor not in anchors:
        print(f"error: frame {anchor} is not a valid anchor", file=sys.stderr)
        return EXIT_INPUT_ERROR
    frames = [scene.frame(anchor), scene.frame(anchor + config.frame_interval)]

    clouds = [back_project(f, i) for i, f in enumerate(frames)]
    merged = merge_clouds(clouds)
    net = losses.default_perceptual_net()
    result = trainer.scene_pipeline(
        ckpt.state.group("encoder"), ckpt.state.group("head"), merged, frames,
        [f.color for f in frames], config, net, want_grads=False,
    )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(config.to_json())
    opts = RenderOptions(threads=args.threads, render_depth=args.depth)
    for view_idx, frame in enumerate(frames):
        if args.reference:
            image, depth = render_reference(
                result.gaussians, frame,
                dataclasses.replace(opts, render_depth=args.depth),
            )
        else:
            out = rasterize_forward(result.gaussians, frame, opts)
            image, depth = out.image, out.depth
        _write_png(out_dir / f"view{view_idx}_frame{frame.frame_id}.png", image)
        if args.depth:
            _write_depth_png(
                out_dir / f"view{view_idx}_frame{frame.frame_id}_depth.png", depth
            )
    print(f"wrote {len(frames)} view(s) to {out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = {
        "rasterizer": verify.gradcheck_rasterizer(seed=args.seed,
                                                  n_scenes=args.scenes),
        "losses": verify.gradcheck_losses(seed=args.seed),
        "pipeline": verify.gradcheck_pipeline(
            seed=args.seed, n_configs=max(1, args.scenes // 4)
        ),
    }
    failed = False
    for name, report in reports.items():
        for klass, err in sorted(report.max_errors.items()):
            status = "ok" if err <= args.tolerance else "FAIL"
            print(f"{name}/{klass}: max relative error {err:.3e} [{status}]")
            failed |= err > args.tolerance
        if report.n_excluded:
            print(f"{name}: excluded {report.n_excluded} tie-flip coordinate(s)")
    return EXIT_VERIFY_FAIL if failed else EXIT_OK


def cmd_overfit(args) -> int:
    trace = verify.run_overfit(
        seed=args.seed, n_gaussians=args.gaussians, steps=args.steps,
        self_target=args.self_target,
    )
    print(f"psnr step 0: {trace[0]:.3f} dB")
    if args.steps > 0:
        stride = max(1, args.steps // 10)
        for i in range(stride, args.steps + 1, stride):
            print(f"psnr step {i}: {trace[i]:.3f} dB")
    if args.min_psnr is not None and trace[-1] < args.min_psnr:
        print(
            f"FAIL: final psnr {trace[-1]:.3f} dB below threshold "
            f"{args.min_psnr:.3f} dB",
            file=sys.stderr,
        )
        return EXIT_VERIFY_FAIL
    return EXIT_OK


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    width, height = args.resolution
    for i in range(args.scenes):
        scene = make_toy_scene(
            seed=args.seed * 1000 + i, width=width, height=height,
            n_frames=args.frames, scene_id=f"scene{i:03d}",
        )
        scene_io.write_scene(scene, out_dir / scene.scene_id)
    (out_dir / "dataset.json").write_text(
        json.dumps(
            {
                "scenes": args.scenes,
                "resolution": [width, height],
                "frames": args.frames,
                "seed": args.seed,
            },
            sort_keys=True,
        )
    )
    print(f"wrote {args.scenes} scene(s) to {out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "pretrain": cmd_pretrain,
        "render": cmd_render,
        "gradcheck": cmd_gradcheck,
        "overfit": cmd_overfit,
        "synth": cmd_synth,
    }
    try:
        return handlers[args.command](args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
