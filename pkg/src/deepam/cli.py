"""Command-line front end.

Subcommands: train, sr, self-sr, eval, render-dict, export-relu.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import model as model_mod
from . import patch_pipeline as pp
from .errors import ConfigError, DataError, NumericalError
from .ipad import default_grid
from .model import TrainConfig, forward, load, rescale_for_noise, save, train


def _parse_arch(text):
    """Arch strings look like "256:35,256:35,256" ("none" for the LS-only model).

    The part after the colon pins the information-preserving atom count;
    omitted, it defaults to the input rank at training time.
    """
    if text is None:
        return [(256, None)] * 3
    text = text.strip()
    if text in ("", "none", "0"):
        return []
    arch = []
    for part in text.split(","):
        fields = part.strip().split(":")
        try:
            d = int(fields[0])
            ipad = int(fields[1]) if len(fields) > 1 and fields[1] != "" else None
        except (ValueError, IndexError) as exc:
            raise ConfigError("bad arch entry %r" % part) from exc
        if d < 1 or len(fields) > 2 or (ipad is not None and ipad < 1):
            raise ConfigError("bad arch entry %r" % part)
        arch.append((d, ipad))
    return arch


def _list_images(directory):
    try:
        names = sorted(os.listdir(directory))
    except OSError as exc:
        raise DataError("cannot list %s: %s" % (directory, exc)) from exc
    files = [os.path.join(directory, n) for n in names
             if n.lower().endswith((".png", ".bmp"))]
    if not files:
        raise DataError("no PNG/BMP images in %s" % directory)
    return files


def _echo_config(command, pairs):
    parts = " ".join("%s=%s" % (k, v) for k, v in pairs)
    print("config: command=%s %s" % (command, parts))


def _grid_from_args(args):
    return default_grid(lo=args.grid_min, hi=args.grid_max)


def _super_resolve(model, lum):
    geom = model.geom
    x0, means, positions = pp.extract_lr_patches(lum, geom, stride=geom.stride)
    preds = forward(model, x0)
    out_size = (lum.shape[0] * geom.s, lum.shape[1] * geom.s)
    fallback = pp.resize_bicubic(lum, geom.s)
    return pp.reconstruct(preds, means, positions, geom, out_size, fallback=fallback)


def _colorize(sr_y, rgb_in, s):
    """Recombine a super-resolved luminance plane with bicubic-upscaled chroma."""
    ycc = pp.rgb_to_ycbcr(rgb_in)
    cb = pp.resize_bicubic(ycc[:, :, 1], s)
    cr = pp.resize_bicubic(ycc[:, :, 2], s)
    stack = np.dstack([np.clip(sr_y, 0.0, 1.0), cb, cr])
    return pp.ycbcr_to_rgb(stack)


def cmd_train(args):
    arch = _parse_arch(args.arch)
    _echo_config("train", [("train_dir", args.train_dir), ("out", args.out_model),
                           ("arch", args.arch or "default"), ("sigma_n", args.sigma_n),
                           ("seed", args.seed), ("stride", args.stride),
                           ("grid", "[%g,%g]" % (args.grid_min, args.grid_max)),
                           ("pairs", args.pairs)])
    datasets = []
    for idx, path in enumerate(_list_images(args.train_dir)):
        lum = pp.load_luminance(path)
        datasets.append(pp.extract_pairs(lum, stride_train=args.stride,
                                         noise_sigma=args.sigma_n,
                                         noise_seed=args.seed + idx + 1))
    ds = pp.PatchDataset(
        x0=np.hstack([d.x0 for d in datasets]),
        y=np.hstack([d.y for d in datasets]),
        lr_means=np.concatenate([d.lr_means for d in datasets]),
        positions=np.vstack([d.positions for d in datasets]),
        geom=datasets[0].geom)
    if args.pairs is not None and args.pairs < ds.n:
        keep = np.sort(np.random.default_rng(args.seed).choice(ds.n, args.pairs,
                                                               replace=False))
        ds = pp.PatchDataset(x0=ds.x0[:, keep], y=ds.y[:, keep],
                             lr_means=ds.lr_means[keep], positions=ds.positions[keep],
                             geom=ds.geom)
    print("training pool: %d patch pairs" % ds.n)
    cfg = TrainConfig(seed=args.seed, grid=_grid_from_args(args),
                      noise_sigma=args.sigma_n)
    model, report = train(ds, arch, cfg)
    save(model, args.out_model)
    with open(args.out_model + ".report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    print("rank of LR patch pool: %d" % report.k0)
    for entry in report.layers:
        surv = np.asarray(entry["survivor_fractions"])
        line = "layer %d: rho_ipad=%g" % (entry["layer"], entry["rho_ipad"])
        if "rho_cad" in entry:
            line += " rho_cad=%g" % entry["rho_cad"]
        d_ipad = entry["d_ipad"]
        line += " survivors ipad=[%.2f,%.2f]" % (surv[:d_ipad].min(), surv[:d_ipad].max())
        if d_ipad < surv.size:
            line += " cad=[%.2f,%.2f]" % (surv[d_ipad:].min(), surv[d_ipad:].max())
        print(line)
    print("model written to %s" % args.out_model)
    return 0


def _print_psnr(label, value):
    print("%s PSNR: %.4f dB" % (label, value))


def cmd_sr(args):
    _echo_config("sr", [("model", args.model), ("image", args.lr_image),
                        ("out", args.out_image), ("sigma_t", args.sigma_t)])
    model = load(args.model)
    img = pp.load_image(args.lr_image)
    if args.sigma_t is not None:
        model = rescale_for_noise(model, args.sigma_t)
    lum = img if img.ndim == 2 else pp.to_luminance(img)
    sr_y = _super_resolve(model, lum)
    if img.ndim == 2:
        pp.save_png(args.out_image, sr_y)
    else:
        pp.save_png(args.out_image, _colorize(sr_y, img, model.geom.s))
    if args.reference:
        ref = pp.load_luminance(args.reference)[:sr_y.shape[0], :sr_y.shape[1]]
        _print_psnr("sr", pp.psnr(ref, sr_y[:ref.shape[0], :ref.shape[1]]))
    return 0


def cmd_self_sr(args):
    arch = _parse_arch(args.arch)
    _echo_config("self-sr", [("image", args.lr_image), ("out", args.out_image),
                             ("arch", args.arch or "default"), ("seed", args.seed)])
    img = pp.load_image(args.lr_image)
    lum = img if img.ndim == 2 else pp.to_luminance(img)
    geom = pp.PatchGeometry()
    if min(lum.shape) < 4 * geom.p:
        raise DataError("image must be at least %d pixels per side" % (4 * geom.p))
    ds = pp.extract_pairs(lum, geom, stride_train=1)
    cfg = TrainConfig(seed=args.seed, grid=_grid_from_args(args),
                      single_batch_iters=args.iters)
    try:
        model, _ = train(ds, arch, cfg)
        sr_y = _super_resolve(model, lum)
    except NumericalError as exc:
        print("warning: degenerate input (%s); falling back to bicubic" % exc,
              file=sys.stderr)
        sr_y = pp.resize_bicubic(lum, geom.s)
    if img.ndim == 2:
        pp.save_png(args.out_image, sr_y)
    else:
        pp.save_png(args.out_image, _colorize(sr_y, img, geom.s))
    if args.reference:
        ref = pp.load_luminance(args.reference)[:sr_y.shape[0], :sr_y.shape[1]]
        _print_psnr("self-sr", pp.psnr(ref, sr_y[:ref.shape[0], :ref.shape[1]]))
    return 0


def cmd_eval(args):
    _echo_config("eval", [("model", args.model), ("test_dir", args.test_dir),
                          ("sigma_t", args.sigma_t), ("rescale", not args.no_rescale),
                          ("seed", args.seed), ("report", args.report)])
    bicubic_only = args.model == "bicubic"
    model = None if bicubic_only else load(args.model)
    geom = model.geom if model else pp.PatchGeometry()
    if args.sigma_t is not None and model is not None and not args.no_rescale:
        model = rescale_for_noise(model, args.sigma_t)
    rows = []
    for idx, path in enumerate(_list_images(args.test_dir)):
        gt = pp.modcrop(pp.load_luminance(path), geom.s)
        lr = pp.resize_bicubic(gt, 1.0 / geom.s)
        if args.sigma_t is not None:
            lr = pp.add_gaussian_noise(lr, args.sigma_t, args.seed + idx)
        bic = pp.resize_bicubic(lr, geom.s)
        pred = bic if model is None else _super_resolve(model, lr)
        name = os.path.splitext(os.path.basename(path))[0]
        rows.append((name, pp.psnr(gt, pred), pp.psnr(gt, bic)))
    avg = ("average", float(np.mean([r[1] for r in rows])),
           float(np.mean([r[2] for r in rows])))
    rows.append(avg)
    if args.report == "csv":
        print("image,psnr,psnr_bicubic")
        for name, a, b in rows:
            print("%s,%.4f,%.4f" % (name, a, b))
    else:
        width = max(len(r[0]) for r in rows)
        print("%-*s  %10s  %10s" % (width, "image", "psnr", "bicubic"))
        for name, a, b in rows:
            print("%-*s  %10.4f  %10.4f" % (width, name, a, b))
    return 0


def cmd_render_dict(args):
    _echo_config("render-dict", [("model", args.model), ("layer", args.layer),
                                 ("out", args.out_png)])
    model = load(args.model)
    layer = args.layer if args.layer in ("synthesis", "d") else int(args.layer)
    mosaic = model_mod.dictionary_mosaic(model, layer)
    pp.save_png(args.out_png, mosaic.astype(np.float64))
    return 0


def cmd_export_relu(args):
    _echo_config("export-relu", [("model", args.model), ("out", args.out_path)])
    model = load(args.model)
    save(model_mod.to_relu_container(model), args.out_path)
    print("rectifier network written to %s" % args.out_path)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deepam",
        description="Deep analysis dictionary models for single-image super-resolution.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_grid(p):
        p.add_argument("--grid-min", type=float, default=1e-4,
                       help="smallest threshold scale searched")
        p.add_argument("--grid-max", type=float, default=90.0,
                       help="largest threshold scale searched")

    p = sub.add_parser("train", help="learn a model from a directory of images")
    p.add_argument("train_dir")
    p.add_argument("out_model")
    p.add_argument("--arch", help='layer spec "d:ipad,..." (default 256,256,256)')
    p.add_argument("--sigma-n", type=float, default=0.0,
                   help="Gaussian noise level added to the LR training images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stride", type=int, default=3, help="training patch stride")
    p.add_argument("--pairs", type=int, default=None,
                   help="cap the training pool by a seeded subsample")
    add_grid(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sr", help="super-resolve one image with a trained model")
    p.add_argument("model")
    p.add_argument("lr_image")
    p.add_argument("out_image")
    p.add_argument("--sigma-t", type=float, default=None,
                   help="noise level of the input; rescales first-layer thresholds")
    p.add_argument("--reference", help="ground-truth image for PSNR")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("self-sr", help="train on the input image itself, then upscale it")
    p.add_argument("lr_image")
    p.add_argument("out_image")
    p.add_argument("--arch", help='layer spec "d:ipad,..." (default 256,256,256)')
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=5000,
                   help="optimizer iterations for the throwaway model")
    p.add_argument("--reference", help="ground-truth image for PSNR")
    add_grid(p)
    p.set_defaults(func=cmd_self_sr)

    p = sub.add_parser("eval", help="PSNR table over a test directory")
    p.add_argument("model", help='model file, or "bicubic" for the baseline')
    p.add_argument("test_dir")
    p.add_argument("--sigma-t", type=float, default=None,
                   help="synthesize LR noise at this level and adapt thresholds")
    p.add_argument("--no-rescale", action="store_true",
                   help="skip threshold rescaling under --sigma-t")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", choices=["csv", "text"], default="text")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render-dict", help="write a dictionary mosaic PNG")
    p.add_argument("model")
    p.add_argument("layer", help='1-based analysis layer index, or "synthesis"')
    p.add_argument("out_png")
    p.set_defaults(func=cmd_render_dict)

    p = sub.add_parser("export-relu", help="write the equivalent rectifier network")
    p.add_argument("model")
    p.add_argument("out_path")
    p.set_defaults(func=cmd_export_relu)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args) or 0
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except ValueError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print("data error: %s" % exc, file=sys.stderr)
        return 3
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
