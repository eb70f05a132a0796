"""Command-line entry point.

Subcommands: train, stylize, superres, optimize, eval, compare, bench,
inspect. Every run is reproducible from its --seed; --deterministic
additionally zeroes wall-clock columns in written reports so identical
runs produce byte-identical files.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import evaluation, networks, training
from .image import ImageIOError, ImagePlane, histogram_match, load_image, save_image
from .losses import ObjectiveSpec
from .networks import (
    CheckpointError,
    build_mini_lossnet,
    build_sr_net,
    build_style_net,
    load_checkpoint,
    save_checkpoint,
)
from .optimize import OptimizeConfig, invert_features, invert_style, optimize_image
from .training import PRESETS, TrainConfig, train_sr, train_style


class CliError(Exception):
    """Runtime failure carrying a user-facing message (exit code 2)."""


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def main(argv=None):
    sys.exit(run(sys.argv[1:] if argv is None else argv))


def run(argv):
    """Parse and execute one invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(_apply_config_file(parser, list(argv)))
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args.handler(args)
        return 0
    except (CliError, CheckpointError, ImageIOError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _apply_config_file(parser, argv):
    """--config FILE supplies defaults; explicit flags still win."""
    if "--config" in argv:
        idx = argv.index("--config")
        try:
            path = argv[idx + 1]
        except IndexError:
            raise _UsageError("--config needs a file argument") from None
        try:
            with open(path) as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise _UsageError(f"cannot read config {path}: {exc}") from None
        del argv[idx:idx + 2]
        parser.set_defaults(**{k.replace("-", "_"): v for k, v in values.items()})
    return argv


def _build_parser():
    parser = _Parser(prog="pfnet", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    parser.set_defaults(command=None)

    p = sub.add_parser("train", help="train a style or super-resolution network")
    p.add_argument("--task", choices=("style", "sr"), required=True)
    p.add_argument("--data", required=True, help="directory of training images")
    p.add_argument("--output", required=True, help="checkpoint path to write (.pfnw)")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--style-image", help="style target image (style task)")
    p.add_argument("--lossnet", help="loss network checkpoint (default: built-in mini)")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int, default=None, help="batch size (paper default: 4)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-3)")
    p.add_argument("--size", type=int, help="style training resolution")
    p.add_argument("--patch", type=int, help="sr high-resolution patch size")
    p.add_argument("--factor", type=int, default=4, help="sr upsampling factor")
    p.add_argument("--sr-loss", choices=("feat", "pixel"), default="feat")
    _objective_flags(p)
    p.add_argument("--log", help="write the training log CSV here")
    _common_flags(p)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("stylize", help="run a trained style network on an image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    _common_flags(p)
    p.set_defaults(handler=_cmd_stylize)

    p = sub.add_parser("superres", help="run a trained sr network on an image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--hist-match", action="store_true",
                   help="match output histogram to the low-resolution input")
    _common_flags(p)
    p.set_defaults(handler=_cmd_superres)

    p = sub.add_parser("optimize", help="image-space optimization baseline")
    p.add_argument("--mode", choices=("style", "invert-feat", "invert-style"),
                   default="style")
    p.add_argument("--content", help="content image (style / invert-feat)")
    p.add_argument("--style", help="style image (style / invert-style)")
    p.add_argument("--output", required=True)
    p.add_argument("--lossnet")
    p.add_argument("--iters", type=int, default=500,
                   help="optimization budget (default 500)")
    p.add_argument("--method", choices=("lbfgs", "adam"), default="lbfgs")
    p.add_argument("--size", type=int, help="output side length (invert-style)")
    p.add_argument("--trace", help="write the objective trace CSV here")
    _objective_flags(p)
    _common_flags(p)
    p.set_defaults(handler=_cmd_optimize)

    p = sub.add_parser("eval", help="PSNR/SSIM over folder pairs")
    p.add_argument("--ref", required=True, help="reference image directory")
    p.add_argument("--test", required=True, help="test image directory")
    p.add_argument("--mode", choices=("y", "rgb"), default="y")
    p.add_argument("--no-quantize", action="store_true",
                   help="compute metrics on unquantized values")
    _report_flags(p)
    _common_flags(p)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("compare", help="objective comparison vs content and baseline")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True, help="directory of content images")
    p.add_argument("--baseline-iters", type=int, default=0)
    p.add_argument("--lossnet")
    _objective_flags(p)
    _report_flags(p)
    _common_flags(p)
    p.set_defaults(handler=_cmd_compare)

    p = sub.add_parser("bench", help="feed-forward vs baseline speed")
    p.add_argument("--model", required=True)
    p.add_argument("--sizes", default="64", help="comma list of square sizes")
    p.add_argument("--baseline-iters", type=int, default=100)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--lossnet")
    _objective_flags(p)
    _report_flags(p)
    _common_flags(p)
    p.set_defaults(handler=_cmd_bench)

    p = sub.add_parser("inspect", help="flops | receptive-field | spec dump")
    p.add_argument("what", choices=("flops", "receptive-field", "spec"))
    p.add_argument("--model", help="checkpoint to inspect")
    p.add_argument("--arch", choices=("style", "sr4", "sr8"),
                   help="inspect a builder architecture instead")
    p.add_argument("--size", type=int, default=256)
    _report_flags(p)
    _common_flags(p)
    p.set_defaults(handler=_cmd_inspect)

    return parser


def _objective_flags(p):
    p.add_argument("--lambda-c", type=float, default=1.0)
    p.add_argument("--lambda-s", type=float, default=5.0)
    p.add_argument("--lambda-tv", type=float, default=1e-6)
    p.add_argument("--content-layer", default="relu2_2")
    p.add_argument("--style-layers", default="relu1_2,relu2_2,relu3_2,relu4_2",
                   help="comma list of style taps")


def _common_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true",
                   help="zero wall-clock columns in written reports")


def _report_flags(p):
    p.add_argument("--json", dest="json_out", help="write a JSON report here")
    p.add_argument("--csv", dest="csv_out", help="write a CSV report here")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_lossnet(args):
    if getattr(args, "lossnet", None):
        return load_checkpoint(args.lossnet)
    return build_mini_lossnet()


def _require_file(path, what):
    if not path:
        raise CliError(f"missing required {what}")
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _objective_from_args(args, lossnet, with_style=True, with_content=True):
    style_taps = tuple(t for t in args.style_layers.split(",") if t)
    spec = ObjectiveSpec(
        lossnet=lossnet,
        lambda_c=args.lambda_c if with_content else 0.0,
        lambda_s=args.lambda_s if with_style else 0.0,
        lambda_tv=args.lambda_tv,
        content_tap=args.content_layer,
        style_taps=style_taps if with_style else (),
    )
    return spec


def _list_images(directory):
    names = sorted(n for n in os.listdir(directory)
                   if os.path.splitext(n)[1].lower() in training.IMAGE_EXTENSIONS)
    if not names:
        raise CliError(f"no images found in {directory}")
    return [(n, load_image(os.path.join(directory, n))) for n in names]


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _trace_to_csv(trace, path, deterministic):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total", "feat", "style", "pixel", "tv", "seconds"])
        for pt in trace.points:
            writer.writerow([
                pt.iteration,
                repr(pt.breakdown.total),
                repr(pt.breakdown.column("feat")),
                repr(pt.breakdown.column("style")),
                repr(pt.breakdown.column("pixel")),
                repr(pt.breakdown.column("tv")),
                "0.0" if deterministic else repr(pt.seconds),
            ])


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_train(args):
    lossnet = _load_lossnet(args)
    preset = PRESETS[f"{args.task}-{args.preset}"]
    if args.task == "style":
        style_path = _require_file(args.style_image, "style image (--style-image)")
        objective = _objective_from_args(args, lossnet)
        objective = objective.with_style_image(load_image(style_path))
        config = TrainConfig(
            task="style",
            objective=objective,
            data_dir=args.data,
            iterations=args.iters or preset["iterations"],
            batch_size=args.batch or preset["batch_size"],
            learning_rate=args.lr or preset["learning_rate"],
            image_size=args.size or preset["image_size"],
            widths=tuple(preset["widths"]),
            seed=args.seed,
            deterministic=args.deterministic,
        )
        ckpt, log = train_style(config)
    else:
        if args.sr_loss == "feat":
            objective = ObjectiveSpec(lossnet=lossnet, lambda_c=1.0,
                                      content_tap=args.content_layer)
        else:
            objective = ObjectiveSpec(lossnet=lossnet, lambda_c=0.0, lambda_pixel=1.0)
        config = TrainConfig(
            task="sr",
            objective=objective,
            data_dir=args.data,
            iterations=args.iters or preset["iterations"],
            batch_size=args.batch or preset["batch_size"],
            learning_rate=args.lr or preset["learning_rate"],
            patch_size=args.patch or preset["patch_size"],
            sr_factor=args.factor,
            sr_width=preset["sr_width"],
            seed=args.seed,
            deterministic=args.deterministic,
        )
        ckpt, log = train_sr(config)
    save_checkpoint(ckpt, args.output)
    if args.log:
        log.to_csv(args.log)
    print(f"wrote {args.output} after {config.iterations} iterations "
          f"(final objective {log.points[-1].breakdown.total:.6g})")


def _cmd_stylize(args):
    ckpt = load_checkpoint(_require_file(args.model, "model"))
    image = load_image(_require_file(args.input, "input image"))
    out = evaluation.stylize(ckpt, image)
    save_image(out, args.output)
    print(f"wrote {args.output}")


def _cmd_superres(args):
    ckpt = load_checkpoint(_require_file(args.model, "model"))
    image = load_image(_require_file(args.input, "input image"))
    out = evaluation.stylize(ckpt, image)
    if args.hist_match:
        out = histogram_match(out, image)
    save_image(out, args.output)
    print(f"wrote {args.output}")


def _cmd_optimize(args):
    lossnet = _load_lossnet(args)
    config = OptimizeConfig(method=args.method, max_iters=args.iters, seed=args.seed)
    trace = None
    if args.mode == "style":
        content = load_image(_require_file(args.content, "content image (--content)"))
        style = load_image(_require_file(args.style, "style image (--style)"))
        objective = _objective_from_args(args, lossnet).with_style_image(style)
        out, trace = optimize_image(objective, config, content=content)
    elif args.mode == "invert-feat":
        content = load_image(_require_file(args.content, "content image (--content)"))
        out = invert_features(lossnet, args.content_layer, content, config,
                              lambda_tv=args.lambda_tv)
    else:
        style = load_image(_require_file(args.style, "style image (--style)"))
        side = args.size or style.height
        taps = tuple(t for t in args.style_layers.split(",") if t)
        out = invert_style(lossnet, taps, style, config, (3, side, side),
                           lambda_tv=args.lambda_tv)
    save_image(out, args.output)
    if args.trace and trace is not None:
        _trace_to_csv(trace, args.trace, args.deterministic)
    print(f"wrote {args.output}")


def _cmd_eval(args):
    refs = dict((n, img) for n, img in _list_images(args.ref))
    tests = dict((n, img) for n, img in _list_images(args.test))
    common = sorted(set(refs) & set(tests))
    if not common:
        raise CliError(f"no common image names between {args.ref} and {args.test}")
    pairs = [(n, refs[n], tests[n]) for n in common]
    report = evaluation.metric_report(pairs, mode=args.mode,
                                      quantize=not args.no_quantize)
    print(f"# mode={report.channel_mode} quantized={report.quantized} "
          f"ssim_window={report.ssim_window} ssim_sigma={report.ssim_sigma}")
    print(f"{'image':24s} {'psnr_db':>10s} {'ssim':>8s}")
    for row in report.rows:
        print(f"{row['name']:24s} {row['psnr']:>10.4f} {row['ssim']:>8.4f}")
    print(f"{'mean':24s} {report.psnr_mean:>10.4f} {report.ssim_mean:>8.4f}")
    if args.json_out:
        _write_json(args.json_out, report.to_dict())
    if args.csv_out:
        with open(args.csv_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "psnr_db", "ssim"])
            for row in report.rows:
                writer.writerow([row["name"], repr(row["psnr"]), repr(row["ssim"])])


def _cmd_compare(args):
    ckpt = load_checkpoint(_require_file(args.model, "model"))
    lossnet = _load_lossnet(args)
    objective = _objective_from_args(args, lossnet)
    images = [img for _, img in _list_images(args.images)]
    if objective.lambda_s > 0:
        raise CliError("compare needs --lambda-s 0 or a prepared style image; "
                       "pass --style-image support via train/optimize flows")
    report = evaluation.compare_objectives(images, objective, ckpt,
                                           baseline_iters=args.baseline_iters,
                                           baseline_seed=args.seed)
    print(f"{'image':10s} {'content_obj':>14s} {'feedforward':>14s}")
    for row in report.rows:
        print(f"{row['name']:10s} {row['content_objective']:>14.6g} "
              f"{row['feedforward_objective']:>14.6g}")
    print(f"feed-forward beats content image on "
          f"{report.fraction_below_content:.0%} of images")
    if args.json_out:
        _write_json(args.json_out, report.to_dict())
    if args.csv_out:
        with open(args.csv_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "content_objective", "feedforward_objective"])
            for row in report.rows:
                writer.writerow([row["name"], repr(row["content_objective"]),
                                 repr(row["feedforward_objective"])])


def _cmd_bench(args):
    ckpt = load_checkpoint(_require_file(args.model, "model"))
    lossnet = _load_lossnet(args)
    objective = _objective_from_args(args, lossnet, with_style=False)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    report = evaluation.benchmark(ckpt, objective, sizes,
                                  baseline_iters=args.baseline_iters,
                                  repeats=args.repeats, seed=args.seed)
    print(f"{'size':>6s} {'forward_s':>12s} {'baseline_s':>12s} {'iters':>6s} {'speedup':>9s}")
    for row in report.rows:
        print(f"{row['size']:>6d} {row['forward_seconds']:>12.4f} "
              f"{row['baseline_seconds']:>12.4f} {row['baseline_iters']:>6d} "
              f"{row['speedup']:>8.1f}x")
    print("# published reference (GPU, full-scale):")
    for ref in report.reference_rows:
        base = ref["baseline_seconds"]
        speed = ref["speedup"]
        print(f"{ref['size']:>6d} {ref['ours_seconds']:>12.4f} "
              f"{base[500]:>12.2f} {'500':>6s} {speed[500]:>8d}x")
    if args.json_out:
        _write_json(args.json_out, report.to_dict())


def _cmd_inspect(args):
    if args.model:
        spec = load_checkpoint(args.model).spec
        label = args.model
    elif args.arch:
        spec = {"style": build_style_net,
                "sr4": lambda: build_sr_net(4),
                "sr8": lambda: build_sr_net(8)}[args.arch]()
        label = args.arch
    else:
        raise CliError("inspect needs --model or --arch")
    if args.what == "flops":
        macs = evaluation.count_multiply_adds(spec, (3, args.size, args.size))
        print(f"{label}: {macs:,} multiply-adds at 3x{args.size}x{args.size}")
        if args.json_out:
            _write_json(args.json_out, {"multiply_adds": macs, "size": args.size})
    elif args.what == "receptive-field":
        rf = evaluation.receptive_field(spec)
        print(f"{label}: analytic receptive field {rf} px")
        if args.json_out:
            _write_json(args.json_out, {"receptive_field": rf})
    else:
        print(json.dumps(spec.to_json(), indent=2))
        if args.json_out:
            _write_json(args.json_out, spec.to_json())


if __name__ == "__main__":
    main()
