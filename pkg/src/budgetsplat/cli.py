"""Command-line surface: train, render, eval, synth, inspect.

Exit codes: 0 success, 2 usage/config error, 3 runtime numeric failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _apply_threads(n: int) -> None:
    # numpy's kernels here run single-threaded; capping the BLAS pools makes
    # --threads 1 bitwise deterministic end to end.
    import os

    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def cmd_train(args) -> int:
    from .config import ConfigError, TrainConfig
    from .scene_io import DatasetError, load_dataset
    from .trainer import TrainingDiverged, train

    try:
        cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
        overrides = {
            "budget": args.budget,
            "iterations": args.iters,
            "seed": args.seed,
            "threads": args.threads,
            "precision": args.precision,
            "cache_capacity": args.cache_capacity,
            "out_dir": args.out,
            "data_path": args.data,
        }
        for key, val in overrides.items():
            if val is not None:
                setattr(cfg, key, val)
        cfg.validate()
        if not cfg.data_path:
            raise ConfigError("no dataset: pass --data or set data_path in the config")
        if not cfg.out_dir:
            raise ConfigError("no output directory: pass --out or set out_dir")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE

    _apply_threads(cfg.threads)
    out_dir = Path(cfg.out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        print(f"output directory {out_dir} is not empty (use --force)", file=sys.stderr)
        return EXIT_USAGE

    try:
        dataset = load_dataset(cfg.data_path, init_points=cfg.init_points, seed=cfg.seed)
    except DatasetError as e:
        print(f"dataset error: {e}", file=sys.stderr)
        return EXIT_IO

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "config.json")
        _, report = train(dataset, cfg, out_dir=out_dir)
    except TrainingDiverged as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    print(
        f"trained {report.final_iteration} iterations, "
        f"{report.final_count} gaussians (peak {report.peak_gaussian_count}); "
        f"artifacts in {out_dir}"
    )
    return EXIT_OK


def _load_cameras_file(path):
    from .scene_io import SchemaError, _camera_from_dict

    try:
        spec = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise SchemaError(f"{path} does not exist")
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON ({e})")
    if spec.get("version") != 1:
        raise SchemaError(f"{path}: unsupported schema version {spec.get('version')!r}")
    return [_camera_from_dict(d, i) for i, d in enumerate(spec.get("cameras", []))]


def cmd_render(args) -> int:
    from .config import TrainConfig
    from .forward import render
    from .images import save_pfm, save_png
    from .scene_io import CheckpointError, DatasetError, load_checkpoint

    try:
        gs = load_checkpoint(args.checkpoint, dtype=np.float64)
        cameras = _load_cameras_file(args.cameras)
    except (CheckpointError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO

    if args.views is not None:
        wanted = [int(v) for v in args.views.split(",")]
        have = {c.cam_id for c in cameras}
        missing = [v for v in wanted if v not in have]
        if missing:
            print(f"error: unknown view id(s) {missing}", file=sys.stderr)
            return EXIT_USAGE
        cameras = [c for c in cameras if c.cam_id in wanted]

    opts = TrainConfig(background=tuple(args.background)).render_options()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for cam in cameras:
        result = render(gs, cam, opts)
        save_png(
            out_dir / f"view_{cam.cam_id:03d}.png",
            np.clip(np.asarray(result.color, dtype=np.float64), 0.0, 1.0),
        )
        if args.depth:
            save_pfm(out_dir / f"view_{cam.cam_id:03d}.pfm", result.depth)
    print(f"rendered {len(cameras)} view(s) into {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .config import TrainConfig
    from .forward import render
    from .images import quantize_linear
    from .metrics import psnr, ssim
    from .scene_io import CheckpointError, DatasetError, load_checkpoint, load_dataset

    try:
        gs = load_checkpoint(args.checkpoint, dtype=np.float64)
        dataset = load_dataset(args.data)
    except (CheckpointError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO

    split = args.split
    ids = dataset.split_ids(split)
    if not ids:
        print(f"error: dataset has no '{split}' split", file=sys.stderr)
        return EXIT_USAGE

    opts = TrainConfig(background=tuple(args.background)).render_options()
    per_view = []
    for cid in ids:
        cam = dataset.camera(cid)
        out = render(gs, cam, opts)
        img = quantize_linear(np.clip(np.asarray(out.color, dtype=np.float64), 0.0, 1.0))
        target = dataset.image(cid)
        per_view.append({"view": cid, "psnr": psnr(img, target), "ssim": ssim(img, target)})
    result = {
        "split": split,
        "aggregate": {
            "psnr": float(np.mean([v["psnr"] for v in per_view])),
            "ssim": float(np.mean([v["ssim"] for v in per_view])),
        },
        "per_view": per_view,
    }
    text = json.dumps(result, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .scene_io import generate_synthetic

    try:
        scene = generate_synthetic(
            seed=args.seed,
            n_gaussians=args.gaussians,
            n_cameras=args.cameras,
            resolution=args.resolution,
            sh_degree=args.sh_degree,
        )
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    scene.write(args.out)
    print(
        f"wrote synthetic scene ({args.gaussians} gaussians, {args.cameras} cameras, "
        f"{args.resolution}x{args.resolution}) to {args.out}"
    )
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .scene_io import CheckpointError, DatasetError, load_checkpoint, load_dataset

    try:
        gs = load_checkpoint(args.checkpoint, dtype=np.float64)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO

    print(f"checkpoint: {args.checkpoint}")
    print(f"gaussians:  {len(gs)}")
    print(f"sh degree:  {gs.sh_degree}")
    if len(gs) == 0:
        return EXIT_OK

    def hist(name, values, edges):
        counts, _ = np.histogram(values, bins=edges)
        rows = " ".join(f"{edges[i]:.3g}..{edges[i+1]:.3g}:{c}" for i, c in enumerate(counts))
        print(f"{name:10s} {rows}")

    opac = gs.opacities()
    scales = gs.scales().max(axis=1)
    hist("opacity", opac, np.array([0.0, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]))
    hist("max scale", scales, np.quantile(scales, [0, 0.25, 0.5, 0.75, 1.0]))
    if len(gs) <= 16:
        print("opacities:", np.array2string(opac, precision=4))

    if args.data:
        from .config import TrainConfig
        from .density import importance_scores

        try:
            dataset = load_dataset(args.data)
        except DatasetError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_IO
        cams = [dataset.camera(i) for i in dataset.split_ids("train")]
        scores = importance_scores(gs, cams, TrainConfig().render_options())
        qs = np.percentile(scores, [0, 10, 25, 50, 75, 90, 100])
        print("importance percentiles (0/10/25/50/75/90/100):")
        print("  " + " ".join(f"{q:.6g}" for q in qs))
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="budgetsplat",
        description="Memory-bounded 3D Gaussian splatting trainer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", help="dataset directory (cameras.json)")
    p.add_argument("--out", help="run directory for artifacts")
    p.add_argument("--budget", type=int, help="max Gaussian count F")
    p.add_argument("--iters", type=int, help="total iterations")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--precision", choices=["f32", "f64"])
    p.add_argument("--cache-capacity", type=int, dest="cache_capacity")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cameras", required=True, help="cameras.json file")
    p.add_argument("--out", required=True)
    p.add_argument("--views", help="comma-separated view ids (default: all)")
    p.add_argument("--depth", action="store_true", help="also write PFM depth maps")
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", help="write metrics JSON here")
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--gaussians", type=int, default=50)
    p.add_argument("--cameras", type=int, default=8)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--sh-degree", type=int, default=1, dest="sh_degree")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset for importance-score percentiles")
    p.set_defaults(func=cmd_inspect)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
