"""Command-line entry point: synth, train, render, eval, gradcheck.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric-check
failure. Every command echoes its fully resolved configuration as a single
`effective-config: {...}` JSON line so runs can be reproduced exactly.

The numeric libraries are imported only after --threads is applied, so the
thread caps reach the BLAS pools; results are identical for any thread
count either way.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ABLATIONS = {
    "film": "disable_film",
    "decouple": "disable_decoupling",
    "hybrid": "disable_hybrid",
    "fea-rgb": "disable_fea_rgb",
    "fea-th": "disable_fea_th",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgbtsplat",
        description="RGB + thermal Gaussian splatting: synthesize, train, render, eval.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numeric thread pools (default: library defaults)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with exact ground truth")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--gaussians", type=int, default=50)
    p.add_argument("--cameras", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=["default", "decoupled"], default="default")

    p = sub.add_parser("train", help="optimize a cloud and network on a dataset")
    p.add_argument("--data", required=True, help="dataset directory (transforms.json)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="JSON config file (overrides defaults)")
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), default=[],
                   help="disable one mechanism (repeatable)")
    p.add_argument("--iters", type=int, default=None, help="override iteration count")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--init-ckpt", default=None, help="initialize from a checkpoint")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--camera-index", type=int, default=None)
    p.add_argument("--data", default=None, help="dataset supplying cameras")
    p.add_argument("--pose", default=None, help="JSON file with intrinsics + transform")
    p.add_argument("--ironbow-png", action="store_true",
                   help="also write the thermal image recolored through the palette")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path; a .json twin is written too")
    p.add_argument("--split", choices=["test", "train", "all"], default="test")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--module", choices=["all", "raster", "net", "pipeline", "loss"],
                   default="all")
    p.add_argument("--inject-sign-flip", action="store_true",
                   help="flip one analytic gradient to prove the checker catches it")
    return parser


def _echo_config(payload: dict) -> None:
    print("effective-config: " + json.dumps(payload, sort_keys=True))


def cmd_synth(args) -> int:
    from .datasets import synth_scene, write_scene

    _echo_config({"command": "synth", "out": str(args.out), "gaussians": args.gaussians,
                  "cameras": args.cameras, "size": args.size, "seed": args.seed,
                  "kind": args.kind})
    scene = synth_scene(n_gaussians=args.gaussians, n_cameras=args.cameras,
                        image_size=args.size, seed=args.seed, kind=args.kind)
    write_scene(scene, args.out)
    print(f"wrote {len(scene.frames)} frame pairs and gt.ckpt to {args.out}")
    return EXIT_OK


def _resolve_train_config(args):
    from .config import TrainConfig

    if args.config:
        cfg = TrainConfig.from_file(args.config)
    else:
        cfg = TrainConfig()
    for name in args.ablate:
        setattr(cfg, ABLATIONS[name], True)
    if args.iters is not None:
        cfg.iterations = args.iters
    if args.seed is not None:
        cfg.seed = args.seed
    if args.eval_every is not None:
        cfg.eval_every = args.eval_every
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .datasets import load_dataset
    from .trainer import train

    cfg = _resolve_train_config(args)
    _echo_config({"command": "train", "data": str(args.data), "out": str(args.out),
                  **cfg.to_dict()})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "effective_config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)

    dataset = load_dataset(args.data)
    cloud = net = None
    if args.init_ckpt:
        cloud, net, _ = load_checkpoint(args.init_ckpt,
                                        expected_feature_dim=cfg.feature_dim)
    result = train(dataset, cfg, cloud=cloud, net=net,
                   metrics_path=out / "metrics.ndjson", quiet=args.quiet)
    save_checkpoint(out / "checkpoint.ply", result.cloud, result.net, cfg.to_dict())
    if result.final_eval:
        mean = result.final_eval["mean"]
        print(f"final eval: psnr_rgb={mean['psnr_rgb']:.2f} "
              f"psnr_thermal={mean['psnr_thermal']:.2f} "
              f"ssim_rgb={mean['ssim_rgb']:.4f} ssim_thermal={mean['ssim_thermal']:.4f}")
    print(f"wrote checkpoint.ply and metrics.ndjson to {out}")
    return EXIT_OK


def _camera_from_pose_file(path):
    import numpy as np
    from .cloud import Camera
    from .datasets import nerf_matrix_to_w2c
    from .errors import MissingField

    with open(path) as fh:
        pose = json.load(fh)
    for key in ("fl_x", "w", "h", "transform_matrix"):
        if key not in pose:
            raise MissingField(f"pose file: missing {key!r}")
    w2c = nerf_matrix_to_w2c(np.asarray(pose["transform_matrix"], dtype=np.float64))
    return Camera(fx=float(pose["fl_x"]), fy=float(pose.get("fl_y", pose["fl_x"])),
                  cx=float(pose.get("cx", pose["w"] / 2)),
                  cy=float(pose.get("cy", pose["h"] / 2)),
                  width=int(pose["w"]), height=int(pose["h"]),
                  world_to_cam=w2c, near=float(pose.get("near", 0.05)),
                  far=float(pose.get("far", 100.0)))


def cmd_render(args) -> int:
    from .checkpoint import load_checkpoint
    from .datasets import load_dataset, save_png
    from .errors import RangeError
    from .ironbow import ironbow_forward
    from .pipeline import RenderSettings, render_frame

    _echo_config({"command": "render", "ckpt": str(args.ckpt),
                  "camera_index": args.camera_index, "pose": args.pose,
                  "out": str(args.out)})
    cloud, net, _ = load_checkpoint(args.ckpt)
    if args.pose:
        camera = _camera_from_pose_file(args.pose)
    elif args.data is not None and args.camera_index is not None:
        dataset = load_dataset(args.data)
        if not 0 <= args.camera_index < len(dataset.cameras):
            raise RangeError(f"camera index {args.camera_index} out of range "
                             f"(dataset has {len(dataset.cameras)} frames)")
        camera = dataset.cameras[args.camera_index]
    else:
        print("render needs either --pose or both --data and --camera-index",
              file=sys.stderr)
        return EXIT_USAGE

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = render_frame(cloud, net, camera, RenderSettings())
    save_png(out / "c_rgb.png", result.c_rgb)
    save_png(out / "c_thermal.png", result.c_thermal)
    if args.ironbow_png:
        save_png(out / "c_thermal_ironbow.png", ironbow_forward(result.c_thermal))
    print(f"wrote c_rgb.png and c_thermal.png to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import csv

    from .checkpoint import load_checkpoint
    from .datasets import load_dataset
    from .pipeline import RenderSettings
    from .trainer import evaluate

    _echo_config({"command": "eval", "ckpt": str(args.ckpt), "data": str(args.data),
                  "out": str(args.out), "split": args.split})
    cloud, net, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    indices = {"test": dataset.test_indices, "train": dataset.train_indices,
               "all": list(range(len(dataset.cameras)))}[args.split]
    report = evaluate(dataset, indices, cloud, net, RenderSettings())

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    columns = ["view", "psnr_rgb", "ssim_rgb", "psnr_thermal", "ssim_thermal"]
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in report["per_view"]:
            writer.writerow({k: row[k] for k in columns})
        writer.writerow({"view": "mean", **{k: report["mean"][k] for k in columns[1:]}})
    json_path = out.with_suffix(".json")
    with open(json_path, "w") as fh:
        json.dump({"scene": dataset.name, "split": args.split, **report}, fh, indent=1)
    m = report["mean"]
    print(f"{args.split}: psnr_rgb={m['psnr_rgb']:.2f} ssim_rgb={m['ssim_rgb']:.4f} "
          f"psnr_thermal={m['psnr_thermal']:.2f} ssim_thermal={m['ssim_thermal']:.4f}")
    print(f"wrote {out} and {json_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    _echo_config({"command": "gradcheck", "seed": args.seed, "module": args.module,
                  "inject_sign_flip": bool(args.inject_sign_flip)})
    ok, results = run_gradcheck(args.module, seed=args.seed,
                                inject_sign_flip=args.inject_sign_flip)
    for r in results:
        print(r)
    if not ok:
        bad = [r.name for r in results if not r.passed]
        print(f"gradcheck FAILED for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"gradcheck passed ({len(results)} parameter classes)")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .errors import DataError, FormatError, RangeError

    handler = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render,
               "eval": cmd_eval, "gradcheck": cmd_gradcheck}[args.command]
    try:
        return handler(args)
    except (DataError, FormatError, RangeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
