"""Command-line entry point: ``cbs {train,eval,ablate,kernel,spectrum}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerics failure.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .analysis import feature_noise_probe
from .data import (
    CIFAR_FILES, MNIST_FILES, Dataset, load_cifar10_dir, load_mnist_dir, make_synthetic,
)
from .exceptions import FormatError, NumericsError
from .models import build_mini_resnet, build_model, build_simple_cnn3, init_params, load_checkpoint
from .smoothing import SigmaSchedule, build_kernel
from .tensor import Rng, write_tensor
from .train import TrainConfig, ablation_run, evaluate, mode_config, train_run

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICS = 1, 2, 3

# flags that only say where things go; excluded when re-running a manifest
_LOCATION_FLAGS = {"out", "resume", "manifest", "stop_after", "verbose", "command"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _int_list(text):
    return tuple(int(v) for v in text.split(","))


def _add_data_flags(p):
    p.add_argument("--data", default="synthetic",
                   help="synthetic, mnist, cifar10, or a directory holding either format")
    p.add_argument("--data-dir", default=None, help="directory for mnist/cifar10")
    p.add_argument("--train-subset", type=int, default=0, help="use only the first N training samples")
    p.add_argument("--test-subset", type=int, default=0)
    p.add_argument("--n-train", type=int, default=512, help="synthetic training samples")
    p.add_argument("--n-test", type=int, default=256, help="synthetic test samples")
    p.add_argument("--classes", type=int, default=4, help="synthetic classes")
    p.add_argument("--size", type=int, default=16, help="synthetic image side")
    p.add_argument("--channels-in", type=int, default=1, help="synthetic image channels")
    p.add_argument("--data-seed", type=int, default=1234, help="synthetic data seed")


def _add_model_flags(p):
    p.add_argument("--model", choices=("simple3", "resnet"), default="simple3")
    p.add_argument("--widths", type=_int_list, default=(32, 64, 128), help="simple3 conv widths")
    p.add_argument("--blocks", type=int, default=3, help="resnet blocks")
    p.add_argument("--width", type=int, default=16, help="resnet stem width")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=("kaiming", "xavier"), default="kaiming")
    p.add_argument("--augment", action="store_true", help="random flip + crop (off by default)")
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--sigma0", type=float, default=1.0)
    p.add_argument("--decay", type=float, default=0.9)
    p.add_argument("--every", type=int, default=5)
    p.add_argument("--granularity", choices=("epoch", "iteration"), default="epoch")
    p.add_argument("--no-eval-smoothing", action="store_true",
                   help="evaluate without blur (default keeps the current sigma)")
    p.add_argument("--no-timing", action="store_true",
                   help="write 0.0 in the seconds column so CSVs compare byte-for-byte")
    p.add_argument("--out", default=None, help="run directory")


def build_parser():
    parser = _Parser(prog="cbs", description="CNN training with an annealed Gaussian blur curriculum.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--cbs", action=argparse.BooleanOptionalAction, default=True,
                   help="blur after every conv (--no-cbs trains the plain baseline)")
    p.add_argument("--mode", default=None, help="smoothing mode; overrides --cbs")
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    p.add_argument("--stop-after", type=int, default=None, help="stop after this many epochs")
    p.add_argument("--manifest", default=None, help="re-run the flags recorded in a run manifest")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_data_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sigma", type=float, default=None, help="override the checkpoint sigma")

    p = sub.add_parser("ablate", help="compare smoothing modes over seeds")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--modes", default="baseline,full_cbs")
    p.add_argument("--seeds", default="1",
                   help="a count N (seeds 0..N-1) or an explicit comma list like 3,7,11")

    p = sub.add_parser("kernel", help="print a Gaussian kernel")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--size", type=int, default=None, help="force an odd kernel size")
    p.add_argument("--out", default=None, help="also write the kernel in tensor format")

    p = sub.add_parser("spectrum", help="per-layer high-frequency report for a checkpoint")
    _add_data_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cutoff", type=float, default=0.25)
    p.add_argument("--sigma", type=float, default=1.0, help="blur used for the blurred columns")
    p.add_argument("--n", type=int, default=64, help="number of test images probed")
    p.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    return parser


# ----------------------------------------------------------------------
# data
# ----------------------------------------------------------------------


def _detect(path):
    if os.path.isdir(os.path.join(path, "cifar-10-batches-bin")):
        return "cifar10"
    names = set(os.listdir(path))
    if any(f in names or f + ".gz" in names for f in CIFAR_FILES["test"]):
        return "cifar10"
    if any(f in names or f + ".gz" in names for f in MNIST_FILES["test"]):
        return "mnist"
    raise DataError(f"{path}: no MNIST or CIFAR-10 files found")


def load_data(args):
    """Return ``(train, test, descriptor)`` for the data flags."""
    kind, directory = args.data, args.data_dir
    if kind == "synthetic":
        full = make_synthetic(args.n_train + args.n_test, args.classes, args.data_seed,
                              args.size, args.channels_in)
        n = args.n_train
        train = Dataset(full.images[:n], full.labels[:n], "synthetic-train", full.classes)
        test = Dataset(full.images[n:], full.labels[n:], "synthetic-test", full.classes)
    else:
        if kind not in ("mnist", "cifar10"):
            directory, kind = kind, None
        if not directory:
            raise DataError(f"--data {args.data} needs --data-dir")
        if not os.path.isdir(directory):
            raise DataError(f"data directory {directory} does not exist")
        kind = kind or _detect(directory)
        loader = load_mnist_dir if kind == "mnist" else load_cifar10_dir
        try:
            train, test = loader(directory, "train"), loader(directory, "test")
        except FileNotFoundError as exc:
            raise DataError(f"missing data file {exc}") from exc
    if args.train_subset:
        train = train.subset(args.train_subset)
    if args.test_subset:
        test = test.subset(args.test_subset)
    return train, test, {"kind": kind, "dir": directory, "n_train": len(train), "n_test": len(test)}


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def _schedule(args):
    return SigmaSchedule(args.sigma0, args.decay, args.every, args.granularity)


def _model_factory(args, ds):
    c, size = ds.images.shape[1], ds.images.shape[2]

    def make(smoothing):
        if args.model == "simple3":
            return build_simple_cnn3(c, size, ds.classes, smoothing, args.widths)
        return build_mini_resnet(args.blocks, args.width, ds.classes, smoothing, c, size)

    return make


def _train_config(args, smoothing, seed=None):
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
        weight_decay=args.weight_decay, seed=args.seed if seed is None else seed,
        smoothing=smoothing, eval_every=args.eval_every, checkpoint_every=args.checkpoint_every,
        init=args.init, augment=args.augment, timing=not args.no_timing,
    )


def _flags(args):
    d = {k: v for k, v in vars(args).items() if k not in _LOCATION_FLAGS}
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _apply_manifest(args, parser):
    with open(args.manifest) as fh:
        recorded = json.load(fh)["cli"]
    defaults = vars(parser.parse_args(["train"]))
    for key, value in recorded.items():
        if key not in defaults:
            raise UsageError(f"manifest flag {key!r} is not a train flag")
        setattr(args, key, tuple(value) if isinstance(value, list) else value)


def cmd_train(args, parser=None):
    if args.manifest:
        _apply_manifest(args, parser or build_parser())
    train, test, desc = load_data(args)
    mode = args.mode or ("full_cbs" if args.cbs else "baseline")
    smoothing = mode_config(mode, _schedule(args), not args.no_eval_smoothing)
    model = _model_factory(args, train)(smoothing)
    cfg = _train_config(args, smoothing)
    extra = {"cli": _flags(args), "data": desc, "model_spec": model.spec, "mode": mode}
    records = train_run(model, train, test, cfg, out_dir=args.out, resume=args.resume,
                        manifest_extra=extra, stop_after=args.stop_after)
    last = records[-1]
    print(f"epoch {last.epoch} train_loss {last.train_loss:.4f} train_acc {last.train_acc:.4f} "
          f"test_acc {last.test_acc:.4f} sigma {last.sigma:.4f}")
    return 0


def cmd_eval(args):
    try:
        model, meta, _ = load_checkpoint(args.ckpt)
    except (FileNotFoundError, FormatError) as exc:
        raise DataError(str(exc)) from exc
    _, test, _ = load_data(args)
    loss, acc = evaluate(model, test, sigma=args.sigma)
    print(json.dumps({"loss": loss, "accuracy": acc, "n": len(test), "sigma": model.sigma}))
    return 0


def _seed_list(text):
    parts = [int(v) for v in text.split(",")]
    if len(parts) == 1:
        if parts[0] < 1:
            raise UsageError("--seeds count must be >= 1")
        return list(range(parts[0]))
    return parts


def cmd_ablate(args):
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    schedule = _schedule(args)
    for m in modes:
        try:
            mode_config(m, schedule)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    seeds = _seed_list(args.seeds)
    train, test, _ = load_data(args)
    shared = _train_config(args, mode_config("full_cbs", schedule, not args.no_eval_smoothing))
    rows = ablation_run(modes, shared, _model_factory(args, train), train, test, seeds, args.out)
    for r in rows:
        print(f"{r.mode}: {100 * r.mean:.2f} +/- {100 * r.std:.2f} (n={len(r.accuracies)})")
    return 0


def format_kernel(kernel):
    """Kernel weights as text rows; a delta kernel prints as ``[1]``."""
    if kernel.is_identity:
        return "[1]"
    return "\n".join("[" + " ".join(f"{w:.8f}" for w in row) + "]" for row in kernel.weights)


def cmd_kernel(args):
    try:
        kernel = build_kernel(args.sigma, size=args.size)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(format_kernel(kernel))
    if args.out:
        with open(args.out, "wb") as fh:
            write_tensor(fh, kernel.weights.astype(np.float32))
    return 0


SPECTRUM_COLUMNS = ("layer", "untrained_raw", "untrained_blurred", "trained_raw", "trained_blurred")


def cmd_spectrum(args):
    if not 0 < args.cutoff < 0.5:
        raise UsageError("--cutoff must lie in (0, 0.5)")
    try:
        trained, meta, _ = load_checkpoint(args.ckpt)
    except (FileNotFoundError, FormatError) as exc:
        raise DataError(str(exc)) from exc
    _, test, _ = load_data(args)
    if tuple(test.images.shape[1:]) != trained.input_shape:
        raise DataError(f"data images {test.images.shape[1:]} do not fit model {trained.input_shape}")
    untrained = build_model(trained.spec)
    seed = meta.get("config", {}).get("seed", 0)
    init_params(untrained, Rng(seed), meta.get("config", {}).get("init", "kaiming"))
    untrained.normalizer = trained.normalizer
    x = trained.preprocess(test.images[: args.n])
    rows = feature_noise_probe(untrained, trained, x, args.sigma, args.cutoff)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPECTRUM_COLUMNS)
        for r in rows:
            w.writerow([r["layer"]] + [f"{r[c]:.8f}" for c in SPECTRUM_COLUMNS[1:]])
    finally:
        if args.out:
            fh.close()
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    commands = {"train": lambda a: cmd_train(a, parser), "eval": cmd_eval, "ablate": cmd_ablate,
                "kernel": cmd_kernel, "spectrum": cmd_spectrum}
    try:
        return commands[args.command](args)
    except UsageError as exc:
        print(f"cbs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError) as exc:
        print(f"cbs: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as exc:
        print(f"cbs: numerics failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except ValueError as exc:
        print(f"cbs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
