"""Command-line entry point: ``fixmatch <subcommand>`` or ``python -m fixmatch``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import logging
import sys
import time

from . import harness
from .augment import CtaState, TransformSpec, WeakAugConfig, apply_transform, read_pnm, strong_augment, weak_augment, write_pnm
from .core import rng_for
from .network import grad_check, random_architecture

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _print_row(row):
    imp = "-" if row["impurity"] is None else f"{row['impurity']:.3f}"
    mask = "-" if row["mask_rate"] is None else f"{row['mask_rate']:.3f}"
    print(
        f"step {row['step']:6d}  lr {row['lr']:.5f}  loss_s {row['loss_s']:.4f}  loss_u {row['loss_u']:.4f}"
        f"  mask {mask}  impurity {imp}  err {row['err']:.4f}  err_ema {row['err_ema']:.4f}",
        flush=True,
    )


def _config(args):
    values = harness.load_config(args.config) if args.config else dict(harness.DEFAULTS)
    values = harness.apply_overrides(values, args.override or [])
    if getattr(args, "output", None):
        values["output_dir"] = args.output
    return harness.ExperimentConfig.from_values(values)


def cmd_train(args):
    cfg = _config(args)
    record, _ = harness.run_experiment(cfg, resume_from=args.resume, progress=_print_row)
    last = record.rows[-1]
    print(f"final EMA test error {last['err_ema']:.4f} (raw {last['err']:.4f}); artifacts in {cfg.output_dir}")
    return EXIT_OK


def cmd_eval(args):
    arrays = harness.checkpoint_load(args.checkpoint)
    values = harness.parse_dataset_spec(args.dataset)
    _, test = harness.load_datasets(values)
    model = harness.checkpoint_model(arrays, use_ema=False)
    ema = harness.checkpoint_model(arrays, use_ema=True)
    if test.image_shape != model.input_shape:
        raise ValueError(f"dataset images {test.image_shape} do not fit the model input {model.input_shape}")
    err = harness.evaluate(model, test)
    err_ema = harness.evaluate(ema, test)
    print(f"step {int(arrays['step'][0])}  examples {len(test)}  err {err:.4f}  err_ema {err_ema:.4f}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values must list at least one value")
    harness.resolve_key(args.knob)
    sweep = harness.run_sweep(cfg, args.knob, values, progress=_print_row if args.verbose else None)
    for val, rec in zip(values, sweep.records):
        last = rec.rows[-1]
        print(f"{sweep.knob}={val}  err_ema {last['err_ema']:.4f}  mask {harness._fmt(last['mask_rate']) or '-'}"
              f"  impurity {harness._fmt(last['impurity']) or '-'}")
    return EXIT_OK


def _parse_transform(text):
    # Kind[:magnitude[:method]]
    parts = text.split(":")
    mag = float(parts[1]) if len(parts) > 1 and parts[1] else None
    method = parts[2] if len(parts) > 2 else None
    return TransformSpec(parts[0], mag, method=method)


def cmd_augment_preview(args):
    if bool(args.transform) == bool(args.policy):
        raise UsageError("give exactly one of --transform or --policy")
    img = read_pnm(args.input)
    rng = rng_for(args.seed, "augment_preview")
    if args.transform:
        out = apply_transform(img, _parse_transform(args.transform))
    elif args.policy == "weak":
        out = weak_augment(img, WeakAugConfig(flip_enabled=not args.no_flip), rng)
    else:
        out = strong_augment(img, args.policy, CtaState(), rng)
    write_pnm(args.output, out)
    return EXIT_OK


def cmd_grad_check(args):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(args.count):
        rng = rng_for(args.seed, "grad_check", 0, i)
        model = random_architecture(rng).init(rng)
        batch = rng.standard_normal((int(rng.integers(2, 5)),) + model.input_shape)
        err, _ = grad_check(model, batch, eps=args.eps, rng=rng)
        worst = max(worst, err)
    secs = time.perf_counter() - t0
    ok = worst <= args.tol
    print(f"max relative error {worst:.3e} over {args.count} architectures ({secs:.1f}s): {'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser():
    p = _Parser(prog="fixmatch", description="Semi-supervised training with confidence-thresholded pseudo-labels.")
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp, required):
        sp.add_argument("--config", required=required, help="key = value config file")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE", help="replace one config value (repeatable)")
        sp.add_argument("--output", help="output directory (overrides output_dir)")

    t = sub.add_parser("train", help="run one experiment")
    with_config(t, True)
    t.add_argument("--resume", help="continue from a training checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test error of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="glyphs[:key=value,...] or idx:images,labels[,metadata]")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="repeat an experiment over values of one knob")
    with_config(s, True)
    s.add_argument("--knob", required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("augment-preview", help="augment a PGM/PPM image")
    a.add_argument("--input", required=True)
    a.add_argument("--output", required=True)
    a.add_argument("--transform", help="Kind[:magnitude[:method]], e.g. Rotate:30")
    a.add_argument("--policy", choices=("weak", "randaugment", "ctaugment"))
    a.add_argument("--no-flip", action="store_true", help="disable flips for the weak policy")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_augment_preview)

    g = sub.add_parser("grad-check", help="finite-difference check of backprop on random networks")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except harness.ConfigError as e:
        print(f"fixmatch: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, FloatingPointError, KeyError) as e:
        print(f"fixmatch: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
