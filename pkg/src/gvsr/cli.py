"""Command-line entry point.

Subcommands: make-dataset, train, eval, ablate, loss, gvmap,
analyze-variance. Exit codes: 0 success, 1 I/O failure, 2 invalid
input/arguments, 3 numeric abort (non-finite loss or gradient).
"""

import argparse
import os
import re
import sys

import numpy as np

from . import __version__, metrics, srmodel, trainer
from .gradients import sobel_forward
from .gvloss import CompositeLossSpec, composite_loss, gv_loss, patch_variance, tv_loss, unfold
from .imagecore import center_crop, crop_to_multiple, load_png, save_png, to_grayscale

LOSS_CHOICES = ("l1", "l2", "ssim", "tv", "gv", "l1+tv", "l1+gv", "l2+tv", "l2+gv", "ssim+tv", "ssim+gv")


def _grad_png(grad):
    # Symmetric normalization around mid-gray so sign is visible.
    peak = float(np.abs(grad).max())
    if peak == 0.0:
        return np.full_like(grad, 0.5)
    return grad / (2.0 * peak) + 0.5


def cmd_loss(args):
    img_a = load_png(args.img_a)
    if args.loss == "tv":
        if args.img_b is not None:
            print("note: --loss tv is unary; second image ignored", file=sys.stderr)
        result = tv_loss(img_a)
    else:
        if args.img_b is None:
            raise ValueError(f"--loss {args.loss} needs two images")
        img_b = load_png(args.img_b)
        if args.loss == "gv":
            result = gv_loss(img_a, img_b, args.n)
        else:
            spec = CompositeLossSpec.from_name(args.loss, reg_weight=args.reg_weight, gv_patch=args.n)
            result = composite_loss(spec, img_a, img_b)
    print(f"{result.value:.9f}")
    if args.grad_out:
        save_png(_grad_png(result.grad_sr), args.grad_out)
    return 0


def cmd_gvmap(args):
    img = crop_to_multiple(load_png(args.image), args.n)
    gx, gy = sobel_forward(to_grayscale(img)[0])
    # Fixed affine map [-4, 4] -> [0, 1] so exports compare across images.
    save_png(((gx + 4.0) / 8.0)[None], f"{args.out_prefix}_gx.png")
    save_png(((gy + 4.0) / 8.0)[None], f"{args.out_prefix}_gy.png")
    n = args.n
    h, w = gx.shape
    grids = {}
    for axis, g in (("x", gx), ("y", gy)):
        v = patch_variance(unfold(g, n)).reshape(h // n, w // n)
        peak = float(v.max())
        vis = v / peak if peak > 0 else np.zeros_like(v)
        save_png(np.repeat(np.repeat(vis, n, axis=0), n, axis=1)[None], f"{args.out_prefix}_v{axis}.png")
        grids[axis] = v.ravel()
    profile = metrics.profile_from_values(grids["x"], grids["y"])
    with open(f"{args.out_prefix}_variance.csv", "w") as fh:
        fh.write(metrics.format_profile_csv(profile))
    return 0


def _slug(path):
    stem = os.path.splitext(os.path.basename(os.path.normpath(path)))[0]
    return re.sub(r"[^A-Za-z0-9_-]+", "_", stem) or "input"


def _collect_variances(path, n):
    """Pooled per-patch variances for a PNG file or a directory of PNGs."""
    if os.path.isdir(path):
        pairs, _ = trainer.load_dataset(path)
        if not pairs:
            raise ValueError(f"no readable images in {path}")
        images = [img for _, img in pairs]
    else:
        images = [load_png(path)]
    vx_parts, vy_parts = [], []
    for img in images:
        p = metrics.variance_profile(img, n)
        vx_parts.append(p.vx)
        vy_parts.append(p.vy)
    return np.concatenate(vx_parts), np.concatenate(vy_parts)


def cmd_analyze_variance(args):
    os.makedirs(args.out, exist_ok=True)
    pools = [_collect_variances(path, args.n) for path in args.inputs]
    peak = max(max(vx.max(), vy.max()) for vx, vy in pools)
    edges = metrics.histogram_edges(peak)
    labels = []
    profiles = []
    for path, (vx, vy) in zip(args.inputs, pools):
        label = _slug(path)
        if label in labels:
            label = f"{label}_{len(labels)}"
        labels.append(label)
        profile = metrics.profile_from_values(vx, vy, edges)
        profiles.append(profile)
        with open(os.path.join(args.out, f"variance_{label}.csv"), "w") as fh:
            fh.write(metrics.format_profile_csv(profile))
        with open(os.path.join(args.out, f"histogram_{label}.csv"), "w") as fh:
            fh.write(metrics.format_histogram_csv(profile))
    with open(os.path.join(args.out, "profile.svg"), "w") as fh:
        fh.write(metrics.render_histogram_svg(profiles, labels))
    return 0


def cmd_make_dataset(args):
    spec = trainer.SyntheticSetSpec(
        count=args.count, size=args.size, seed=args.seed,
        min_shapes=args.min_shapes, max_shapes=args.max_shapes,
    )
    manifest = trainer.make_synthetic_dataset(spec, args.out)
    print(f"wrote {manifest['count']} images to {args.out}")
    return 0


def _build_config(args):
    file_vals = trainer.parse_config_file(args.config) if args.config else {}

    def pick(flag, key, cast, fallback):
        if flag is not None:
            return flag
        if key in file_vals:
            return cast(file_vals[key])
        return fallback

    train_dir = pick(args.train_dir, "train_dir", str, None)
    val_dir = pick(args.val_dir, "val_dir", str, None)
    if not train_dir or not val_dir:
        raise ValueError("train_dir and val_dir are required (flag or config file)")
    scale = pick(args.scale, "scale", int, 2)
    loss_name = pick(args.loss, "loss", str, "l2+gv")
    spec = CompositeLossSpec.from_name(
        loss_name,
        reg_weight=pick(args.reg_weight, "lambda", float, 1.0),
        gv_patch=pick(args.patch, "patch", int, trainer.default_patch(scale)),
    )
    return trainer.TrainConfig(
        train_dir=train_dir,
        val_dir=val_dir,
        loss=spec,
        seed=pick(args.seed, "seed", int, 0),
        scale=scale,
        epochs=pick(args.epochs, "epochs", int, 30),
        batch=pick(args.batch, "batch", int, 8),
        crop=pick(args.crop, "crop", int, 64),
        lr_rate=pick(args.lr, "lr", float, 1e-3),
        model=pick(args.model, "model", str, "shuffle"),
        out_dir=pick(args.out, "out_dir", str, ""),
    )


def cmd_train(args):
    config = _build_config(args)
    if not config.out_dir:
        raise ValueError("--out is required")
    _, reports = trainer.train(config)
    if reports:
        last = reports[-1]
        print(f"epoch {last.epoch}: loss {last.train_loss:.6f} val_psnr {last.val_psnr:.3f} val_ssim {last.val_ssim:.5f}")
    print(f"checkpoint: {os.path.join(config.out_dir, 'model.ckpt')}")
    return 0


def cmd_eval(args):
    if (args.ckpt is None) == (not args.bicubic):
        raise ValueError("pass exactly one of --ckpt or --bicubic")
    if args.bicubic:
        model = trainer.bicubic_infer(args.scale)
        scale = args.scale
    else:
        params = srmodel.load_checkpoint(args.ckpt)
        model, scale = params, params.scale
    n = args.patch if args.patch is not None else trainer.default_patch(scale)
    report, pools = trainer.evaluate(model, args.data, scale, n, border=args.border)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write(metrics.format_metric_csv(report))
    for kind in ("sr", "hr"):
        profile = metrics.profile_from_values(pools[f"{kind}_vx"], pools[f"{kind}_vy"])
        with open(os.path.join(args.out, f"variance_{kind}.csv"), "w") as fh:
            fh.write(metrics.format_profile_csv(profile))
    if report.skipped:
        with open(os.path.join(args.out, "skipped.txt"), "w") as fh:
            fh.write("\n".join(report.skipped) + "\n")
        print(f"skipped {len(report.skipped)} unreadable images", file=sys.stderr)
    print(f"mean psnr {report.mean_psnr:.6f} dB, mean ssim {report.mean_ssim:.6f}")
    return 0


def cmd_ablate(args):
    if not args.out:
        raise ValueError("--out is required")
    if args.preset == "table2-desk":
        base = trainer.desk_preset(os.path.join(args.out, "data"), seed=args.seed if args.seed is not None else 0)
        grid = trainer.DESK_GRID
    else:
        if not args.train_dir or not args.val_dir:
            raise ValueError("custom ablation needs --train-dir and --val-dir")
        base = _build_config(args)
        grid = tuple(s.strip() for s in args.grid.split(",") if s.strip())
    rows = trainer.ablation(base, grid, args.out)
    print(f"wrote {os.path.join(args.out, 'ablation.csv')} ({len(rows)} rows)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="gvsr", description="Gradient-variance loss toolkit for super-resolution.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate a synthetic hard-edged HR dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of images")
    p.add_argument("--size", type=int, default=96, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-shapes", type=int, default=4)
    p.add_argument("--max-shapes", type=int, default=10)
    p.set_defaults(fn=cmd_make_dataset)

    def add_train_flags(p):
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("--train-dir")
        p.add_argument("--val-dir")
        p.add_argument("--out", help="output directory")
        p.add_argument("--loss", help="base[+reg], e.g. l2, l1+gv (default l2+gv)")
        p.add_argument("--lambda", dest="reg_weight", type=float, help="regularizer weight (default 1.0)")
        p.add_argument("--patch", type=int, help="variance patch size n (default 8 for s=2, else 16)")
        p.add_argument("--seed", type=int)
        p.add_argument("--scale", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--crop", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--model", choices=srmodel.MODEL_KINDS, help="architecture (default shuffle)")

    p = sub.add_parser("train", help="train an SR model")
    add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or bicubic baseline) on a directory of HR images")
    p.add_argument("--ckpt", help="checkpoint path")
    p.add_argument("--bicubic", action="store_true", help="evaluate the bicubic baseline instead of a model")
    p.add_argument("--data", required=True, help="directory of HR PNGs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scale", type=int, default=2, help="upscaling factor (used with --bicubic)")
    p.add_argument("--patch", type=int, help="variance patch size n")
    p.add_argument("--border", type=int, help="metric border crop in pixels (default: scale)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train the loss grid and emit a comparison table")
    add_train_flags(p)
    p.add_argument("--preset", choices=("table2-desk",), help="shipped desk-scale setup (writes its own data)")
    p.add_argument("--grid", default=",".join(trainer.DESK_GRID), help="comma-separated loss names")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("loss", help="compute a loss between two images")
    p.add_argument("img_a")
    p.add_argument("img_b", nargs="?", help="second image (unused for --loss tv)")
    p.add_argument("--loss", required=True, choices=LOSS_CHOICES)
    p.add_argument("--n", type=int, default=8, help="variance patch size for gv")
    p.add_argument("--lambda", dest="reg_weight", type=float, default=1.0, help="regularizer weight for composites")
    p.add_argument("--grad-out", help="write the normalized loss gradient as a PNG")
    p.set_defaults(fn=cmd_loss)

    p = sub.add_parser("gvmap", help="export gradient maps and patch-variance maps of one image")
    p.add_argument("image")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(fn=cmd_gvmap)

    p = sub.add_parser("analyze-variance", help="patch-variance histograms for one or two images/directories")
    p.add_argument("inputs", nargs="+", help="one or two PNG files or directories")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze_variance)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "analyze-variance" and len(args.inputs) > 2:
            raise ValueError("at most two inputs")
        return args.fn(args)
    except srmodel.NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
