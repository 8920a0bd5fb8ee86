import argparse
import logging
import sys
from typing import Dict, List, Optional

from trajdrop.errors import DataError, NumericError, TrajdropError, UsageError
from trajdrop.experiments import (
    cmd_evaluate,
    cmd_import,
    cmd_sweep,
    cmd_train,
    read_config_file,
    resolve_configs,
)
from trajdrop.objects import ARCHITECTURES

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="root seed (default 0)")
    parser.add_argument("--out", dest="output_dir", default=None, help="output directory")
    parser.add_argument("--config", default=None, help="flat key = value config file")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajdrop",
        description="Pedestrian trajectory forecasting with Monte-Carlo dropout uncertainty",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_import = sub.add_parser("import", help="prepare a dataset cache from annotations")
    _common(p_import)
    p_import.add_argument("src", nargs="?", help="obsmat or tsv annotation file")
    p_import.add_argument("--format", dest="annotation_format", choices=["obsmat", "tsv"])
    p_import.add_argument("--synthetic", type=int, default=None, metavar="N",
                          help="generate N constant-velocity tracks instead")
    p_import.add_argument("--history", dest="history_steps", type=int)
    p_import.add_argument("--future", type=int, default=None, help="F steps")
    p_import.add_argument("--dt", type=float)
    p_import.add_argument("--train-fraction", dest="train_fraction", type=float)
    p_import.add_argument("--stride", type=int)

    p_train = sub.add_parser("train", help="train one or every configured architecture")
    _common(p_train)
    p_train.add_argument("cache")
    p_train.add_argument("--arch", choices=ARCHITECTURES, default=None,
                         help="default: every architecture of the config")
    p_train.add_argument("--dropout", dest="training_dropout", type=float)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--lr", dest="learning_rate", type=float)

    p_eval = sub.add_parser("evaluate", help="ADE/FDE/CS report for one checkpoint")
    _common(p_eval)
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("cache")
    p_eval.add_argument("--mode", choices=["deterministic", "mc"], default="mc")
    p_eval.add_argument("--n-mc", dest="mc_passes", type=int)
    p_eval.add_argument("--p", type=float, default=None, help="inference dropout")
    p_eval.add_argument("--no-distributions", action="store_true",
                        help="skip the per-trajectory distribution CSVs")

    p_sweep = sub.add_parser("sweep", help="grid over dropout p and horizons")
    _common(p_sweep)
    p_sweep.add_argument("--checkpoints", nargs="*", default=[])
    p_sweep.add_argument("--caches", nargs="+", required=True)
    p_sweep.add_argument("--p", dest="dropout_probabilities", type=float, nargs="+")
    p_sweep.add_argument("--horizons", type=float, nargs="+", help="T_f in seconds")
    p_sweep.add_argument("--n-mc", dest="mc_passes", type=int)
    p_sweep.add_argument("--retrain", action="store_const", const=True, default=None,
                         help="train checkpoints missing for a horizon")
    return parser


_OVERRIDE_KEYS = [
    "seed",
    "output_dir",
    "annotation_format",
    "history_steps",
    "dt",
    "train_fraction",
    "stride",
    "training_dropout",
    "epochs",
    "batch_size",
    "learning_rate",
    "mc_passes",
    "dropout_probabilities",
    "horizons",
    "retrain",
]


def run(args: argparse.Namespace) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    overrides: Dict[str, object] = {
        key: getattr(args, key) for key in _OVERRIDE_KEYS if hasattr(args, key)
    }
    experiment, train_config = resolve_configs(file_values, overrides)

    if args.command == "import":
        src = args.src or (experiment.dataset_paths[0] if experiment.dataset_paths else None)
        cmd_import(src, experiment, horizon_steps=args.future, synthetic=args.synthetic)
    elif args.command == "train":
        for architecture in [args.arch] if args.arch else experiment.architectures:
            cmd_train(args.cache, architecture, experiment, train_config)
    elif args.command == "evaluate":
        p = args.p if args.p is not None else experiment.dropout_probabilities[0]
        cmd_evaluate(
            args.checkpoint,
            args.cache,
            args.mode,
            experiment.mc_passes,
            p,
            experiment.seed,
            experiment.output_dir,
            export_distributions=not args.no_distributions,
        )
    elif args.command == "sweep":
        cmd_sweep(args.checkpoints, args.caches, experiment, train_config)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        return run(args)
    except UsageError as e:
        logging.error(f"usage: {e}")
        return EXIT_USAGE
    except NumericError as e:
        logging.error(f"numeric error: {e}")
        return EXIT_NUMERIC
    except DataError as e:
        logging.error(f"data error: {e}")
        return EXIT_DATA
    except TrajdropError as e:
        # Dimension / parameter problems come from bad flags or files
        logging.error(f"usage: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
