"""Command line entry point.

Exit status: 0 on success, 2 for usage or input errors, 3 for numerical
failures during training.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import TrainConfig
from .dataset import DatasetError
from .experiment import (
    METHODS,
    ExperimentSpec,
    cmd_ablate_lambda,
    cmd_cluster,
    cmd_export_embeddings,
    cmd_pretrain,
    cmd_sweep_k,
    make_synthetic_corpus,
)

EXIT_USAGE = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("dcec")


def parse_k(text: str) -> tuple[int, ...]:
    """``"5"``, ``"2-9"``, ``"2..9"`` or ``"2,4,8"``."""
    text = str(text).strip()
    try:
        for sep in ("..", "-"):
            if sep in text:
                lo, hi = (int(v) for v in text.split(sep, 1))
                if hi < lo:
                    raise ValueError
                return tuple(range(lo, hi + 1))
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid k or k-range {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number list {text!r}") from None


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; keys use flag names with or without dashes."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string("[config]\n" + path.read_text())
    return {k.replace("-", "_"): v for k, v in cp["config"].items()}


def _shared(p: argparse.ArgumentParser, manifest: bool = True) -> None:
    if manifest:
        p.add_argument("--manifest", type=Path, help="CSV with header path,label,group")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--k", type=parse_k, default=(9,), help="cluster count, or a range like 2-9")
    p.add_argument("--lambda", dest="lambda_rec", type=float, default=None, help="reconstruction weight")
    p.add_argument("--update-interval", type=int, default=None)
    p.add_argument("--delta", type=float, default=None, help="label-change stopping threshold")
    p.add_argument("--epochs", type=int, default=None, help="pretraining epochs")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None, help="k-means restarts")
    p.add_argument("--method", default="dcec")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--config", type=Path, default=None, help="flat key=value file mirroring the flags")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcec", description="Deep convolutional embedded clustering of images.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("pretrain", "train the autoencoder on reconstruction"),
        ("cluster", "cluster a corpus with dcec, dec or cae-kmeans"),
        ("sweep-k", "run every method over a range of k"),
        ("ablate-lambda", "average dcec metrics over k for several lambda values"),
        ("export-embeddings", "write per-image embeddings and clusters"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _shared(p)
        if name == "ablate-lambda":
            p.add_argument("--lambdas", type=_float_list, default=[0.1, 0.5, 0.9, 1.0])
        if name == "sweep-k":
            p.set_defaults(method=",".join(METHODS))
    p = sub.add_parser("make-synthetic", help="generate a labelled toy corpus")
    _shared(p, manifest=False)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=100)
    p.set_defaults(image_size=32)
    return parser


def _parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        values = read_config_file(args.config)
    except (OSError, configparser.Error) as exc:
        parser.error(str(exc))
    # re-parse with file values as defaults so explicit flags still win
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key == "lambda":
            key = "lambda_rec"
        if key not in known or key in ("config", "help"):
            parser.error(f"unknown config key {key!r}")
        action = known[key]
        try:
            defaults[key] = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            parser.error(f"config key {key!r}: {exc}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _spec(args, method: str | None = None) -> ExperimentSpec:
    if args.manifest is None:
        raise ValueError("--manifest is required")
    config = TrainConfig().with_overrides(
        lambda_rec=args.lambda_rec,
        update_interval=args.update_interval,
        tolerance=args.delta,
        pretrain_epochs=args.epochs,
        batch_size=args.batch_size,
        max_iterations=args.max_iterations,
        kmeans_restarts=args.restarts,
        seed=args.seed,
    )
    return ExperimentSpec(
        manifest=args.manifest,
        out=args.out,
        method=method or args.method,
        k_values=tuple(args.k),
        image_size=args.image_size,
        config=config,
        checkpoint=args.checkpoint,
    )


def run(args: argparse.Namespace) -> None:
    cmd = args.command
    if cmd == "make-synthetic":
        path = make_synthetic_corpus(args.out, args.classes, args.per_class, args.image_size, args.seed)
        print(path)
    elif cmd == "pretrain":
        _, losses = cmd_pretrain(_spec(args))
        print(f"pretrained {len(losses)} epochs; final loss {losses[-1] if losses else float('nan'):.6f}")
    elif cmd == "cluster":
        out = cmd_cluster(_spec(args))
        r = out.record
        print(f"{r.method} k={r.k}: SC={r.silhouette} CHI={r.calinski_harabasz} ACC={r.acc} iterations={r.iterations}")
    elif cmd == "sweep-k":
        methods = [m.strip() for m in args.method.split(",") if m.strip()]
        for m in methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        records = cmd_sweep_k(_spec(args, methods[0]), methods)
        print(f"{len(records)} runs written to {args.out / 'sweep_k.csv'}")
    elif cmd == "ablate-lambda":
        rows = cmd_ablate_lambda(_spec(args, "dcec"), args.lambdas)
        print(f"{len(rows)} rows written to {args.out / 'ablation.csv'}")
    elif cmd == "export-embeddings":
        print(cmd_export_embeddings(_spec(args)))


def main(argv=None) -> int:
    args = _parse(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger("PIL").setLevel(logging.WARNING)
    try:
        run(args)
    except (ArithmeticError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (DatasetError, CheckpointError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
