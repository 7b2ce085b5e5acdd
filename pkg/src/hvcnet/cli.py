"""Command-line entry point: ``hvcnet <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import ensemble as ens
from .checkpoint import load_checkpoint, save_checkpoint
from .config import describe_keys, load_run_config
from .data.augment import AugmentConfig, augment_batch
from .data.idx import ImageSet, load_idx
from .data.proxy import digits_proxy
from .errors import ConfigError, DimensionError, FormatError, NumericError
from .model import build
from .predictions import PredictionMatrix, synthetic_matrix
from .train import evaluate, init_state, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        if self.prog != "hvcnet":
            # repeated on subcommands; SUPPRESS keeps a top-level value
            self.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="cap on all worker pools and BLAS threads")

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- data helpers ----------------------------------------------------------------------


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--images", help="IDX image file (optionally .gz)")
    g.add_argument("--labels", help="IDX label file")
    g.add_argument("--proxy", choices=("train", "test"), help="use the bundled 8x8 digits upscaled to 28x28 instead of IDX files")
    g.add_argument("--subset", type=int, help="use only the first N images")


def _load_data(args) -> ImageSet:
    if args.proxy:
        train_set, test_set = digits_proxy()
        data = train_set if args.proxy == "train" else test_set
    elif args.images:
        if not args.labels:
            data = ImageSet(*_images_only(args.images))
        else:
            data = load_idx(args.images, args.labels)
    else:
        raise UsageError("give --images/--labels or --proxy")
    if args.subset is not None:
        data = data.subset(slice(0, args.subset))
    return data


def _images_only(path):
    from .data.idx import read_images

    images = read_images(path)
    return images, np.zeros(len(images), dtype=np.uint8)


# -- commands --------------------------------------------------------------------------


def _overrides(args) -> dict:
    values = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        values[key] = value
    for key in ("epochs", "seed", "threads", "head", "branches", "merge", "augment", "batch_size"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    if getattr(args, "fp64_verify", False):
        values["dtype"] = "float64"
    return values


def cmd_train(args) -> int:
    run = load_run_config(args.config, _overrides(args))
    cfg = run.train
    paths = run.paths
    if args.proxy or not paths.get("train_images"):
        if not args.proxy:
            raise UsageError("no training data: set train_images/train_labels in the config or pass --proxy")
        train_set, test_set = digits_proxy()
    else:
        train_set = load_idx(paths["train_images"], paths["train_labels"])
        test_set = load_idx(paths["test_images"], paths["test_labels"]) if paths.get("test_images") else None
    if paths.get("train_subset"):
        train_set = train_set.subset(slice(0, paths["train_subset"]))
    if test_set is not None and paths.get("test_subset"):
        test_set = test_set.subset(slice(0, paths["test_subset"]))

    def report(rec):
        print(rec.log_line(), flush=True)

    result = train(cfg, train_set, test_set, out_dir=args.out, resume=args.resume, on_epoch=report)
    st = result.state
    if st.best_epoch >= 0:
        print(f"best EMA test accuracy {st.best_accuracy:.6f} at epoch {st.best_epoch}")
    return EXIT_OK


def cmd_init(args) -> int:
    run = load_run_config(args.config, _overrides(args))
    model, _ = build(run.train.model, seed=run.train.seed)
    save_checkpoint(args.out, model, init_state(model, run.train.seed))
    print(f"wrote untrained checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    data = _load_data(args)
    ema = ckpt.state.ema if not args.no_ema else None
    acc, _ = evaluate(ckpt.model, data, ema, args.batch_size)
    print(f"accuracy {acc:.6f} ({int(round(acc * data.count))}/{data.count})")
    return EXIT_OK


def cmd_dump_preds(args) -> int:
    data = _load_data(args)
    rows, names = [], []
    for path in args.ckpt:
        ckpt = load_checkpoint(path)
        acc, preds = evaluate(ckpt.model, data, None if args.no_ema else ckpt.state.ema, args.batch_size)
        rows.append(preds)
        names.append(Path(path).stem if not args.full_names else str(path))
        print(f"{path}: accuracy {acc:.6f}")
    matrix = PredictionMatrix(data.labels, np.stack(rows), names)
    matrix.save(args.out)
    print(f"wrote {matrix.k} x {matrix.n} prediction matrix {args.out}")
    return EXIT_OK


def cmd_params(args) -> int:
    run = load_run_config(args.config, _overrides(args))
    _, manifest = build(run.train.model)
    print(manifest.table())
    return EXIT_OK


def write_pgm(path, image: np.ndarray) -> None:
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def cmd_augment_preview(args) -> int:
    data = _load_data(args)
    config = AugmentConfig(strategy=args.strategy)
    count = min(args.count, data.count)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    idx = np.arange(count)
    aug = augment_batch(data.images, idx, config, args.seed, args.epoch, threads=args.threads or 1)
    for i in idx:
        write_pgm(out / f"{i:05d}_orig.pgm", data.images[i])
        write_pgm(out / f"{i:05d}_aug.pgm", aug[i])
    print(f"wrote {2 * count} PGM files to {out}")
    return EXIT_OK


def _thresholds(text):
    if not text:
        return []
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad --thresholds {text!r}") from None


def cmd_ensemble_count(args) -> int:
    matrix = PredictionMatrix.load(args.matrix)
    thresholds = _thresholds(args.thresholds)
    if args.sample:
        report = ens.sample_subsets(matrix, args.sample, args.sizes, thresholds, args.seed, args.tie_break)
    else:
        report = ens.enumerate_subsets(
            matrix, args.sizes, thresholds, args.tie_break, max_models=args.max_models, threads=args.threads or 1
        )
    print(report.to_text())
    if args.histogram:
        np.savetxt(args.histogram, np.column_stack([np.arange(report.n + 1), report.histogram]), fmt="%d", delimiter=",",
                   header="correct,subsets", comments="")
    return EXIT_OK


def cmd_ensemble_vote(args) -> int:
    matrix = PredictionMatrix.load(args.matrix)
    try:
        models = [int(m) for m in args.models.split(",")] if args.models else list(range(matrix.k))
    except ValueError:
        raise UsageError(f"bad --models {args.models!r}") from None
    bad = [m for m in models if not 0 <= m < matrix.k]
    if bad:
        raise UsageError(f"model index {bad[0]} outside [0, {matrix.k})")
    voted = ens.majority_vote(matrix.preds[models], args.tie_break, matrix.class_count)
    correct = int(np.count_nonzero(voted == matrix.labels))
    print(f"models: {','.join(map(str, models))}  tie-break: {args.tie_break}")
    print(f"accuracy {correct / matrix.n:.6f} ({correct}/{matrix.n})")
    return EXIT_OK


def cmd_ensemble_troublesome(args) -> int:
    matrix = PredictionMatrix.load(args.matrix)
    print(ens.troublesome_digits(matrix).to_text(matrix.labels))
    return EXIT_OK


def cmd_ensemble_synthetic(args) -> int:
    matrix = synthetic_matrix(args.k, args.n, args.accuracy, args.seed, hard_fraction=args.hard_fraction)
    matrix.save(args.out)
    print(f"wrote {matrix.k} x {matrix.n} synthetic prediction matrix {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def _add_config_args(p):
    p.add_argument("--config", help="flat 'key = value' config file (keys below)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--head", choices=("hvc-z", "hvc-xy", "fc"))
    p.add_argument("--branches", type=int, choices=(1, 3))
    p.add_argument("--merge", choices=("not-learnable", "random-init", "ones-init"))
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (file or --set; flags win over the file):\n" + describe_keys()
    parser = _Parser(
        prog="hvcnet",
        description="Train, evaluate and analyze branching capsule-head digit classifiers.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, help="cap on all worker pools and BLAS threads")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    raw = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("train", help="train a model", epilog=epilog, formatter_class=raw)
    _add_config_args(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--augment", choices=("full", "translate-2px", "translate-margin", "none"))
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--out", metavar="DIR", help="directory for metrics.log, last.hvck and best.hvck")
    p.add_argument("--fp64-verify", action="store_true", help="run in float64 (slow; for verification)")
    p.add_argument("--proxy", action="store_true", help="train on the bundled digits proxy set")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("init", help="write an untrained checkpoint", epilog=epilog, formatter_class=raw)
    _add_config_args(p)
    p.add_argument("--out", required=True, metavar="CKPT")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("eval", help="accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--no-ema", action="store_true", help="use raw instead of averaged weights")
    p.add_argument("--batch-size", type=int, default=500)
    _add_data_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-preds", help="write a prediction matrix from checkpoints")
    p.add_argument("--ckpt", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--no-ema", action="store_true")
    p.add_argument("--full-names", action="store_true", help="name rows by full checkpoint path")
    p.add_argument("--batch-size", type=int, default=500)
    _add_data_args(p)
    p.set_defaults(func=cmd_dump_preds)

    p = sub.add_parser("params", help="parameter manifest table", epilog=epilog, formatter_class=raw)
    _add_config_args(p)
    p.set_defaults(func=cmd_params)

    for name in ("augment-preview", "augment"):
        p = sub.add_parser(name, help="write original and augmented images as PGM" if name == "augment-preview" else "augmentation tools")
        if name == "augment":
            asub = p.add_subparsers(dest="augment_command", metavar="command", parser_class=_Parser)
            p = asub.add_parser("preview", help="write original and augmented images as PGM")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--strategy", default="full", choices=("full", "translate-2px", "translate-margin", "none"))
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epoch", type=int, default=0)
        p.add_argument("--count", type=int, default=16)
        _add_data_args(p)
        p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("ensemble", help="majority-vote ensemble analysis")
    esub = p.add_subparsers(dest="ensemble_command", metavar="command", parser_class=_Parser)
    q = esub.add_parser("count", help="accuracy distribution over model subsets")
    q.add_argument("--matrix", required=True)
    q.add_argument("--sizes", default="2-", help="subset family: all, odd or A-B (default 2-, sizes >= 2)")
    q.add_argument("--thresholds", default="99.70,99.75,99.80,99.82,99.84,99.86,99.88")
    q.add_argument("--tie-break", choices=ens.TIE_BREAKS, default="lowest")
    q.add_argument("--max-models", type=int, default=ens.DEFAULT_MAX_MODELS)
    q.add_argument("--sample", type=int, help="estimate from N random subsets instead of exact enumeration")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--histogram", metavar="CSV", help="also write the full correct-count histogram")
    q.set_defaults(func=cmd_ensemble_count)
    q = esub.add_parser("vote", help="accuracy of one ensemble")
    q.add_argument("--matrix", required=True)
    q.add_argument("--models", help="comma-separated model indices (default all)")
    q.add_argument("--tie-break", choices=ens.TIE_BREAKS, default="lowest")
    q.set_defaults(func=cmd_ensemble_vote)
    q = esub.add_parser("troublesome", help="samples misclassified by all, by a majority, or disagreed on")
    q.add_argument("--matrix", required=True)
    q.set_defaults(func=cmd_ensemble_troublesome)
    q = esub.add_parser("synthetic", help="write a random prediction matrix (fixtures, benchmarks)")
    q.add_argument("--k", type=int, required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--accuracy", type=float, default=0.8)
    q.add_argument("--hard-fraction", type=float)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_ensemble_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        threads = args.threads
        if threads is not None and threads < 1:
            raise UsageError("--threads must be >= 1")
        with threadpool_limits(limits=threads or 1):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DimensionError, FileNotFoundError, IsADirectoryError, PermissionError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, OverflowError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
