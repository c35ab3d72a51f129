"""Command-line interface.

Subcommands: train, eval, sr, degrade, params, gradcheck. Exit codes:
0 success, 1 usage error, 2 unusable input data, 3 numeric failure.
Report-producing paths write a CSV and render a matching PNG figure
beside it.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DataError,
    DatasetIndex,
    degrade,
    load_image,
    load_pairs,
    prepare_degraded_set,
    quantize,
    save_image,
    upscale_bicubic,
)
from .models import (
    DENSE_VARIANTS,
    ModelConfig,
    build_dense_block,
    build_model,
    count_parameters,
    init_weights,
    parameter_breakdown,
    parse_config,
    reconcile_attention_conventions,
    serialize_config,
)
from .trainer import NumericsError, TrainConfig, evaluate, predict, train
from .weights import WeightFormatError, load_model, save_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

BICUBIC = "bicubic"


class UsageError(Exception):
    """Semantically invalid flag combination."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aldsr", description="Attention-aware depthwise super-resolution toolkit.")
    p.add_argument("--version", action="version", version=f"aldsr {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model on a directory of HR PNGs")
    t.add_argument("--config", required=True, help="model config file (key = value lines)")
    t.add_argument("--data-hr", required=True, help="directory of HR training PNGs")
    t.add_argument("--out-dir", required=True, help="output directory (loss.csv, loss.png, weights, checkpoints)")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--resume", default=None, help="checkpoint stem to resume from")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--iterations-per-epoch", type=int, default=1000)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--patch-size", type=int, default=48)
    t.add_argument("--lr0", type=float, default=1e-4)
    t.add_argument("--halve-at-epoch", type=int, default=200)
    t.add_argument("--checkpoint-every", type=int, default=0, help="iterations between checkpoints (0: final only)")
    t.add_argument("--no-augment", action="store_true", help="disable flip/rot90 augmentation")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score reconstructions against HR references")
    e.add_argument("--weights", required=True, help=f"weight file, or '{BICUBIC}' for the interpolation baseline")
    e.add_argument("--hr-dir", required=True, help="directory of HR reference PNGs")
    e.add_argument("--lr-dir", default=None, help="directory of LR inputs (default: degrade HR on the fly)")
    e.add_argument("--config", default=None, help="model config (default: <weights stem>.cfg next to the weights)")
    e.add_argument("--scale", type=int, default=None, help=f"upscaling factor (required with '{BICUBIC}')")
    e.add_argument("--shave", type=int, default=None, help="border pixels excluded from metrics (default: scale)")
    e.add_argument("--out-csv", default=None, help="write per-image CSV here (a PNG chart lands beside it)")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sr", help="upscale one PNG")
    s.add_argument("--weights", required=True, help=f"weight file, or '{BICUBIC}'")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--config", default=None, help="model config (default: sidecar .cfg)")
    s.add_argument("--scale", type=int, default=None, help=f"upscaling factor (required with '{BICUBIC}')")
    s.set_defaults(fn=cmd_sr)

    d = sub.add_parser("degrade", help="materialize a bicubic-degraded LR set + index")
    d.add_argument("--hr-dir", required=True)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--scale", type=int, required=True)
    d.set_defaults(fn=cmd_degrade)

    pr = sub.add_parser("params", help="parameter counts and attention-convention reconciliation")
    pr.add_argument(
        "--arch",
        default="all",
        choices=("aldsr", "aldb") + DENSE_VARIANTS + ("all",),
    )
    pr.add_argument("--target", type=int, default=257_280,
                    help="budget to reconcile the ald-rdb attention convention against")
    pr.set_defaults(fn=cmd_params)

    g = sub.add_parser("gradcheck", help="finite-difference verification of the autodiff")
    g.add_argument("--suite", default="all", choices=("core", "layers", "model", "all"))
    g.set_defaults(fn=cmd_gradcheck)
    return p


# ---------------------------------------------------------------------------
# helpers


def _load_model_bundle(weights_path: str, config_path):
    wpath = Path(weights_path)
    cpath = Path(config_path) if config_path else wpath.with_suffix(".cfg")
    if not wpath.exists():
        raise DataError(f"weights not found: {wpath}")
    if not cpath.exists():
        raise DataError(
            f"model config not found: {cpath} (write one or pass --config)"
        )
    cfg = parse_config(cpath.read_text())
    if cfg.variant != "aldsr":
        raise DataError(f"weights describe variant {cfg.variant!r}; need an aldsr model")
    model = build_model(cfg)
    load_model(wpath, model)
    return model, cfg


def _gather_eval_pairs(hr_dir, lr_dir, scale: int):
    hr_dir = Path(hr_dir)
    files = sorted(hr_dir.glob("*.png"))
    if not files:
        raise DataError(f"no PNG files in {hr_dir}")
    named = []
    for f in files:
        hr = load_image(f)
        if lr_dir is not None:
            lrp = Path(lr_dir) / f.name
            if not lrp.exists():
                raise DataError(f"missing LR counterpart for {f.name} in {lr_dir}")
            lr = load_image(lrp)
            th, tw = lr.shape[1] * scale, lr.shape[2] * scale
            if hr.shape[1] < th or hr.shape[2] < tw:
                raise DataError(
                    f"{f.name}: HR {hr.shape[1]}x{hr.shape[2]} smaller than LR x{scale}"
                )
            hr = hr[:, :th, :tw]
        else:
            hc = (hr.shape[1] // scale) * scale
            wc = (hr.shape[2] // scale) * scale
            if hc < scale or wc < scale:
                raise DataError(f"{f.name}: too small for scale {scale}")
            hr = hr[:, :hc, :wc]
            lr = quantize(degrade(hr.astype(np.float64), scale)).astype(np.float32)
        named.append((f.stem, hr, lr))
    return named


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = parse_config(Path(args.config).read_text())
    if cfg.variant != "aldsr":
        raise DataError(f"training needs variant = aldsr, config says {cfg.variant!r}")
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    index = prepare_degraded_set(args.data_hr, out_dir / "data", cfg.scale)
    pairs = load_pairs(index)
    print(f"dataset: {len(pairs)} pair(s) at x{cfg.scale}")

    model = build_model(cfg)
    init_weights(model, scheme=cfg.init, seed=cfg.seed)
    print(f"model: {count_parameters(model)} parameters")

    tcfg = TrainConfig(
        batch_size=args.batch_size,
        patch_size=args.patch_size,
        lr0=args.lr0,
        halve_at_epoch=args.halve_at_epoch,
        epochs=args.epochs,
        iterations_per_epoch=args.iterations_per_epoch,
        seed=cfg.seed,
        augment=not args.no_augment,
        checkpoint_every=args.checkpoint_every,
    )
    rows = train(model, pairs, tcfg, out_dir=out_dir, resume=args.resume)

    save_model(out_dir / "model.aldw", model)
    (out_dir / "model.cfg").write_text(serialize_config(cfg))
    from .reports import save_loss_curve

    save_loss_curve(out_dir / "loss.csv", out_dir / "loss.png")
    if rows:
        print(f"final loss: {rows[-1][3]:.6f} after {rows[-1][0] + 1} iterations")
    print(f"wrote {out_dir / 'model.aldw'}, {out_dir / 'loss.csv'}, {out_dir / 'loss.png'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.weights == BICUBIC:
        if args.scale is None:
            raise UsageError("--weights bicubic requires --scale")
        scale = args.scale
        runner = lambda lr: upscale_bicubic(lr.astype(np.float64), scale)
        label = f"bicubic x{scale}"
    else:
        model, cfg = _load_model_bundle(args.weights, args.config)
        if args.scale is not None and args.scale != cfg.scale:
            raise UsageError(f"--scale {args.scale} contradicts the model scale {cfg.scale}")
        scale = cfg.scale
        runner = model
        label = f"{args.weights} (x{scale})"

    named = _gather_eval_pairs(args.hr_dir, args.lr_dir, scale)
    shave = args.shave if args.shave is not None else scale
    report = evaluate(runner, named, shave=shave)
    print(f"eval: {label}, shave={shave}")
    print(report.format_table())
    if args.out_csv:
        out_csv = Path(args.out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_csv)
        from .reports import save_metric_chart

        chart = out_csv.with_suffix(".png")
        save_metric_chart(report, chart)
        print(f"wrote {out_csv} and {chart}")
    return EXIT_OK


def cmd_sr(args) -> int:
    lr = load_image(args.input)
    if args.weights == BICUBIC:
        if args.scale is None:
            raise UsageError("--weights bicubic requires --scale")
        sr = upscale_bicubic(lr.astype(np.float64), args.scale)
    else:
        model, cfg = _load_model_bundle(args.weights, args.config)
        if args.scale is not None and args.scale != cfg.scale:
            raise UsageError(f"--scale {args.scale} contradicts the model scale {cfg.scale}")
        sr = predict(model, lr)
    out = Path(args.output)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, np.asarray(sr))
    print(f"wrote {out} ({sr.shape[2]}x{sr.shape[1]})")
    return EXIT_OK


def cmd_degrade(args) -> int:
    index = prepare_degraded_set(args.hr_dir, args.out_dir, args.scale)
    print(f"prepared {len(index.entries)} pair(s) under {args.out_dir}")
    print(f"index: {Path(args.out_dir) / f'index_x{args.scale}.txt'}")
    return EXIT_OK


def _print_arch_params(variant: str):
    if variant in DENSE_VARIANTS:
        model = build_dense_block(variant)
    else:
        cfg = ModelConfig(variant=variant)
        model = build_model(cfg)
    total = count_parameters(model)
    print(f"{variant}: {total} parameters")
    for group, n in parameter_breakdown(model):
        print(f"  {group:<10} {n}")
    return total


def cmd_params(args) -> int:
    archs = ["rdb", "dw-rdb", "ldw-rdb", "ald-rdb", "aldb", "aldsr"] if args.arch == "all" else [args.arch]
    for variant in archs:
        _print_arch_params(variant)
    if "ald-rdb" in archs:
        rows, matches = reconcile_attention_conventions(args.target)
        print(f"attention convention sweep against target {args.target}:")
        for row in rows:
            mark = "  <- exact" if row in matches else ""
            print(f"  r={row['r']:<3} gate_bias={str(row['gate_bias']):<5} count={row['count']}{mark}")
        if not matches:
            print("  no convention reproduces the target exactly")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(args.suite)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<24} max_rel_err={r.max_rel_err:.3e} tol={r.tol:g}")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"aldsr: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericsError, FloatingPointError) as e:
        print(f"aldsr: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, WeightFormatError, KeyError, OSError, ValueError) as e:
        print(f"aldsr: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
