import argparse
import os
import sys
import textwrap
from typing import Callable, Dict, List, Optional, TextIO, Union

import numpy as np

from shrinknet import env_info
from shrinknet.checkpoint import load_checkpoint, save_checkpoint
from shrinknet.data import (
    EXPECTED_LAYOUT,
    RECORDING_STEPS,
    NoiseSpec,
    load_split,
    save_split,
    split_manifest,
    write_manifest,
    write_synthetic_dataset,
)
from shrinknet.experiments import (
    DATA_ROOT_ENV,
    ExperimentReport,
    ModelResult,
    Table,
    model_config,
    prepare_split,
    resolve_data_root,
    run_table1,
    run_table2,
    run_table3,
)
from shrinknet.gradcheck import check_parameter_gradients
from shrinknet.layers import softmax_cross_entropy
from shrinknet.models import ModelConfig, ModelKind, build_drsn, build_model
from shrinknet.options import (
    DEFAULT_OPTIONS,
    TrainOptions,
    TrainOptionSet,
    option_set_from_dict,
    parse_enum,
)
from shrinknet.report import emit_report, format_table
from shrinknet.tensor import Tensor
from shrinknet.training import evaluate, train_loop
from shrinknet.util import (
    ConfigurationError,
    DivergenceError,
    ShrinkNetError,
    debug,
    in_debug,
    set_debug,
)

SPLIT_FILE = "split.npz"
SPLIT_MANIFEST = "split.json"
MODEL_FILE = "model.shrk"
LAST_GOOD_FILE = "last_good.shrk"


def _option_arg(field: str) -> Callable[[str], object]:
    def parse(argstr: str) -> object:
        value = TrainOptionSet.parse_field(field, argstr)
        if value is None:
            raise argparse.ArgumentTypeError(f"invalid value for {field}: {argstr!r}")
        return value

    parse.__name__ = field
    return parse


def _model_kind(argstr: str) -> ModelKind:
    try:
        return parse_enum(ModelKind, argstr)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _add_option(
    parser: argparse.ArgumentParser, field: str, metavar: str, help: str
) -> None:
    parser.add_argument(
        "--" + field.replace("_", "-"),
        dest=field,
        type=_option_arg(field),
        metavar=metavar,
        help=help,
    )


def command_line_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(
        add_help=False, formatter_class=argparse.RawTextHelpFormatter
    )
    common.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="Output additional debugging information on stderr",
    )
    common.add_argument(
        "--data-root",
        dest="data_root",
        metavar="DIR",
        help=textwrap.dedent(
            f"""\
            Root of the gesture recordings, laid out as
                {EXPECTED_LAYOUT}
            Defaults to the {DATA_ROOT_ENV} environment variable.
            """
        ),
    )
    common.add_argument(
        "--out", metavar="DIR", help="Directory for the files this command writes"
    )
    common.add_argument(
        "--synthetic",
        action="store_true",
        default=None,
        help="Use generated class-dependent signals instead of recordings",
    )
    _add_option(common, "seed", "INT", "Seed for splitting, initialization and shuffling")
    _add_option(common, "mode", "MODE", "Threshold sharing of the DRSN: cs or cw")
    _add_option(common, "snr_db", "FLOAT", "Signal-to-noise ratio of injected noise, in dB")
    _add_option(common, "subjects", "N", "Use the first N subjects of the dataset")
    _add_option(common, "epochs", "INT", "Training epochs per network")
    _add_option(common, "batch_size", "INT", "Minibatch size")
    _add_option(common, "learning_rate", "FLOAT", "Step size of the network optimizer")
    _add_option(common, "optimizer", "KIND", "adam or sgd")
    _add_option(common, "momentum", "FLOAT", "Momentum of the sgd optimizer")
    _add_option(common, "precision", "KIND", "float64 or float32")
    _add_option(common, "split_ratio", "FLOAT", "Fraction of each class used for training")
    _add_option(common, "segment_method", "KIND", "equal or energy")
    _add_option(common, "allow_truncation", "BOOL", "Accept recordings of unexpected length")
    _add_option(common, "noise_kind", "KIND", "gaussian, pink or laplacian")
    _add_option(common, "noise_seeds", "INT", "Seeds per condition in the noise experiment")
    _add_option(common, "epoch_list", "INT,INT", "Epoch budgets compared by table2")
    _add_option(common, "features", "KIND", "Baseline features: timedomain or flatten_decim")
    _add_option(common, "lr_learning_rate", "FLOAT", "Logistic regression step size")
    _add_option(common, "lr_epochs", "INT", "Logistic regression epochs")
    _add_option(common, "lr_l2", "FLOAT", "Logistic regression L2 penalty")
    _add_option(common, "rf_trees", "INT", "Random forest size")
    _add_option(common, "rf_max_depth", "INT", "Random forest tree depth limit")
    _add_option(common, "rf_workers", "INT", "Threads used to grow the random forest")
    _add_option(common, "synthetic_per_class", "INT", "Synthetic samples per gesture")
    _add_option(common, "synthetic_width", "INT", "Synthetic window length")

    parser = argparse.ArgumentParser(
        prog="shrinknet",
        description="Deep residual shrinkage networks for sEMG gesture classification",
    )
    subparsers = parser.add_subparsers(help="sub-command help", dest="action")

    def add(name: str, help: str, description: str = "") -> argparse.ArgumentParser:
        return subparsers.add_parser(
            name,
            help=help,
            parents=[common],
            formatter_class=argparse.RawTextHelpFormatter,
            description=textwrap.dedent(description) or help,
        )

    add(
        "prepare",
        "Ingest, split and normalize a dataset",
        f"""\
        Loads the recordings (or synthesizes samples), splits them per gesture
        and writes {SPLIT_FILE} and {SPLIT_MANIFEST} under --out.
        """,
    )
    train_parser = add(
        "train",
        "Train one network and save a checkpoint",
        f"""\
        Writes {MODEL_FILE}, the report files, and on divergence
        {LAST_GOOD_FILE} (the weights after the last finite epoch).
        """,
    )
    train_parser.add_argument(
        "--model",
        type=_model_kind,
        default=ModelKind.drsn,
        metavar="KIND",
        help="drsn (default) or cnn",
    )
    train_parser.add_argument(
        "--split", metavar="FILE", help=f"A {SPLIT_FILE} written by the prepare command"
    )
    train_parser.add_argument(
        "--noise",
        action="store_true",
        help="Corrupt every raw window with --noise-kind noise at --snr-db before splitting",
    )
    eval_parser = add("eval", "Evaluate a checkpoint on a prepared split")
    eval_parser.add_argument("checkpoint", metavar="CHECKPOINT", help="A saved model")
    eval_parser.add_argument(
        "--split", required=True, metavar="FILE", help="The prepared split to score"
    )
    gradcheck_parser = add(
        "gradcheck",
        "Compare analytic and numeric gradients of a small DRSN",
        """\
        Builds a two-stage network of the chosen --mode, and compares every
        parameter's backpropagated gradient with central differences.
        Coordinates whose probes cross a kink are skipped.
        """,
    )
    gradcheck_parser.add_argument(
        "--tolerance",
        type=float,
        default=1e-4,
        metavar="FLOAT",
        help="Largest acceptable relative error (default 1e-4)",
    )
    add(
        "table1",
        "Accuracy of logistic regression, random forest, CNN and DRSN",
    )
    add("table2", "DRSN accuracy for each --epoch-list budget")
    add(
        "table3",
        "DRSN accuracy on clean and on noise-corrupted data",
        """\
        Trains --noise-seeds networks per condition; reports the mean and
        the population standard deviation across seeds.
        """,
    )
    synth_parser = add(
        "synth",
        "Write synthetic recordings in the dataset layout",
        f"""\
        Writes --subjects subjects of integer recordings under --out,
        laid out as {EXPECTED_LAYOUT}
        """,
    )
    synth_parser.add_argument(
        "--timesteps",
        type=int,
        default=RECORDING_STEPS,
        metavar="INT",
        help=f"Samples per recording (default {RECORDING_STEPS})",
    )
    return parser


def _out_dir(args: argparse.Namespace) -> str:
    return args.out or os.path.join("shrinknet-out", args.action)


def prepare(
    args: argparse.Namespace, options: TrainOptions, stdout: TextIO, stderr: TextIO
) -> int:
    split_, dataset = prepare_split(resolve_data_root(args.data_root), options)
    out_dir = _out_dir(args)
    os.makedirs(out_dir, exist_ok=True)
    split_path = os.path.join(out_dir, SPLIT_FILE)
    save_split(split_, split_path)
    write_manifest(os.path.join(out_dir, SPLIT_MANIFEST), dataset)
    print(
        f"prepared {len(split_.train)} training and {len(split_.test)} test samples "
        f"from {dataset['source']} in {split_path}",
        file=stdout,
    )
    return 0


def _noise_record(noise: Optional[NoiseSpec]) -> Optional[Dict[str, object]]:
    if noise is None:
        return None
    return {"kind": noise.kind.value, "snr_db": noise.snr_db}


def train(
    args: argparse.Namespace, options: TrainOptions, stdout: TextIO, stderr: TextIO
) -> int:
    noise = options.noise_spec() if args.noise else None
    if args.split:
        if noise is not None:
            raise ConfigurationError(
                "noise", "a prepared split is already normalized; pass --noise without --split"
            )
        split_ = load_split(args.split)
        dataset = split_manifest(split_, os.path.abspath(args.split), options.split_ratio)
    else:
        split_, dataset = prepare_split(resolve_data_root(args.data_root), options, noise)
    out_dir = _out_dir(args)
    os.makedirs(out_dir, exist_ok=True)
    kind: ModelKind = args.model
    model = build_model(model_config(options, split_), kind)
    try:
        model, metrics = train_loop(
            model,
            split_,
            options,
            checkpoint_path=os.path.join(out_dir, LAST_GOOD_FILE),
        )
    except DivergenceError as exc:
        if exc.checkpoint_path is not None:
            print(f"last good weights saved to {exc.checkpoint_path}", file=stderr)
        raise
    save_checkpoint(model, os.path.join(out_dir, MODEL_FILE))
    result = ModelResult(
        kind.value, options.seed, metrics.train_accuracy[-1], metrics.accuracy, metrics
    )
    report = ExperimentReport(
        "train",
        options,
        dataset["source"],
        dict(dataset, noise=_noise_record(noise)),
        Table(
            ["model", "train_accuracy", "test_accuracy"],
            [[kind.value, f"{result.train_accuracy:.4f}", f"{result.test_accuracy:.4f}"]],
        ),
        [result],
        curves={kind.value: metrics},
        primary=kind.value,
    )
    emit_report(report, out_dir)
    stdout.write(format_table(report.table))
    return 0


def evaluate_checkpoint(
    args: argparse.Namespace, options: TrainOptions, stdout: TextIO, stderr: TextIO
) -> int:
    model = load_checkpoint(args.checkpoint)
    split_ = load_split(args.split)
    evaluation = evaluate(model, split_.test)
    print(
        f"{model.kind.value} on {len(split_.test)} test samples: "
        f"accuracy {evaluation.accuracy:.4f}, loss {evaluation.loss:.4f}",
        file=stdout,
    )
    for row in confusion_rows_of(evaluation.confusion):
        print(" ".join(row), file=stdout)
    return 0


def confusion_rows_of(confusion: np.ndarray) -> List[List[str]]:
    width = max(len(str(int(confusion.max()))), 1)
    return [[str(int(v)).rjust(width) for v in row] for row in confusion]


def gradient_check_config(options: TrainOptions) -> ModelConfig:
    """A two-stage network small enough to check exhaustively."""
    return ModelConfig(
        input_channels=2,
        input_width=16,
        stem_channels=3,
        stage_channels=(3, 4),
        blocks_per_stage=(2, 1),
        num_classes=3,
        mode=options.mode,
        seed=options.seed,
    ).validate()


def gradcheck(
    args: argparse.Namespace, options: TrainOptions, stdout: TextIO, stderr: TextIO
) -> int:
    config = gradient_check_config(options)
    model = build_drsn(config)
    rng = np.random.default_rng(options.seed)
    x = Tensor(rng.normal(size=(4, config.input_channels, config.input_width)))
    labels = [i % config.num_classes for i in range(4)]
    # Eval-mode batch norm, running statistics warmed up on x.
    model.train()
    for _ in range(3):
        model.forward(x)
    model.eval()
    errors = check_parameter_gradients(
        dict(model.named_parameters()),
        lambda: softmax_cross_entropy(model.forward(x), labels),
    )
    width = max(len(name) for name in errors)
    for name, error in errors.items():
        print(f"{name.ljust(width)}  {error:.3e}", file=stdout)
    worst = max(errors, key=errors.__getitem__)
    if errors[worst] > args.tolerance:
        print(
            f"gradient check failed: {worst} has relative error {errors[worst]:.3e} "
            f"(tolerance {args.tolerance:g})",
            file=stderr,
        )
        return 1
    print(f"{config.mode.value} gradients agree; worst error {errors[worst]:.3e}", file=stdout)
    return 0


def _experiment(
    run: Callable[[Optional[str], TrainOptions], ExperimentReport]
) -> Callable[[argparse.Namespace, TrainOptions, TextIO, TextIO], int]:
    def handler(
        args: argparse.Namespace, options: TrainOptions, stdout: TextIO, stderr: TextIO
    ) -> int:
        report = run(resolve_data_root(args.data_root), options)
        emit_report(report, _out_dir(args))
        stdout.write(format_table(report.table))
        return 0

    return handler


def synth(
    args: argparse.Namespace, options: TrainOptions, stdout: TextIO, stderr: TextIO
) -> int:
    root = args.out or args.data_root
    if not root:
        print("synth needs a destination: pass --out", file=stderr)
        return 2
    paths = write_synthetic_dataset(
        root, subjects=options.subjects, timesteps=args.timesteps, seed=options.seed
    )
    print(f"wrote {len(paths)} recordings under {root}", file=stdout)
    return 0


HANDLERS: Dict[str, Callable[[argparse.Namespace, TrainOptions, TextIO, TextIO], int]] = {
    "prepare": prepare,
    "train": train,
    "eval": evaluate_checkpoint,
    "gradcheck": gradcheck,
    "table1": _experiment(run_table1),
    "table2": _experiment(run_table2),
    "table3": _experiment(run_table3),
    "synth": synth,
}


def unwalled_main(cmd_args: Union[List[str], argparse.Namespace]) -> int:
    parser = command_line_parser()
    if isinstance(cmd_args, argparse.Namespace):
        args = cmd_args
    else:
        args = parser.parse_args(cmd_args)
    if not args.action:
        parser.print_help(sys.stderr)
        return 2
    set_debug(args.verbose)
    if in_debug():
        debug(env_info())
    try:
        options = DEFAULT_OPTIONS.overlay(option_set_from_dict(args.__dict__)).validate()
        return HANDLERS[args.action](args, options, sys.stdout, sys.stderr)
    except ShrinkNetError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def main(cmd_args: Optional[List[str]] = None) -> None:
    if cmd_args is None:
        cmd_args = sys.argv[1:]
    sys.exit(unwalled_main(cmd_args))


if __name__ == "__main__":
    main()
