"""
The comparison experiments: four-model accuracy, epoch budget, and noise robustness.

Every run builds one normalized DatasetSplit and trains every model on it;
noisy runs corrupt the raw windows first and keep the same split membership.
Numbers in a report are functions of the recorded options and seeds.
"""

import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from shrinknet.baselines import feature_matrix, lr_train, predict, rf_train
from shrinknet.data import (
    EXPECTED_LAYOUT,
    NUM_GESTURES,
    DatasetSplit,
    GestureSample,
    NoiseSpec,
    add_noise_to_samples,
    gen_synthetic,
    load_dataset,
    split,
    split_manifest,
)
from shrinknet.models import ModelConfig, ModelKind, build_model
from shrinknet.options import TrainOptions
from shrinknet.training import Metrics, train_loop
from shrinknet.util import DataError, debug

DATA_ROOT_ENV = "SHRINKNET_DATA_ROOT"
VALIDATION_NOTE = "validation accuracy is measured on the held-out test split"


@dataclass
class Table:
    header: List[str]
    rows: List[List[str]]


@dataclass
class ModelResult:
    """One trained model's headline numbers and the seed that produced them."""

    name: str
    seed: int
    train_accuracy: float
    test_accuracy: float
    metrics: Optional[Metrics] = None


@dataclass
class ExperimentReport:
    """
    Everything an experiment produced.

    ``curves`` maps a series prefix to per-epoch metrics; ``primary`` names
    the curve whose confusion matrix is emitted.
    """

    experiment: str
    options: TrainOptions
    source: str
    dataset: Dict[str, Any]
    table: Table
    results: List[ModelResult] = field(default_factory=list)
    curves: Dict[str, Metrics] = field(default_factory=dict)
    primary: Optional[str] = None
    files: List[str] = field(default_factory=list)

    def record(self) -> Dict[str, Any]:
        return {
            "experiment": self.experiment,
            "source": self.source,
            "options": self.options.to_record(),
            "dataset": self.dataset,
            "note": VALIDATION_NOTE,
            "table": {"header": self.table.header, "rows": self.table.rows},
            "results": [
                {
                    "model": r.name,
                    "seed": r.seed,
                    "train_accuracy": r.train_accuracy,
                    "test_accuracy": r.test_accuracy,
                    "epochs": r.metrics.epochs if r.metrics is not None else None,
                }
                for r in self.results
            ],
            "files": sorted(os.path.basename(f) for f in self.files),
        }


def resolve_data_root(flag_value: Optional[str]) -> Optional[str]:
    """The ``--data-root`` flag, else the environment variable, else None."""
    return flag_value or os.environ.get(DATA_ROOT_ENV) or None


def model_config(options: TrainOptions, split_: DatasetSplit) -> ModelConfig:
    channels, width = split_.train[0].window.shape
    return ModelConfig(
        input_channels=channels,
        input_width=width,
        num_classes=NUM_GESTURES,
        mode=options.mode,
        seed=options.seed,
        precision=options.precision,
    ).validate()


def load_samples(
    data_root: Optional[str], options: TrainOptions
) -> Tuple[List[GestureSample], str]:
    """Raw (unnormalized) samples for one run and their source."""
    if options.synthetic:
        source = "synthetic"
        samples = gen_synthetic(
            NUM_GESTURES,
            options.synthetic_per_class,
            options.synthetic_width,
            seed=options.seed,
        )
    else:
        if data_root is None:
            raise DataError(
                f"no dataset given; pass --data-root, set {DATA_ROOT_ENV}, or use "
                f"--synthetic. Expected layout: {EXPECTED_LAYOUT}"
            )
        source = os.path.abspath(data_root)
        samples = load_dataset(
            data_root,
            subjects=options.subjects,
            method=options.segment_method,
            allow_truncation=options.allow_truncation,
        )
    return samples, source


def split_samples(
    samples: Sequence[GestureSample],
    source: str,
    options: TrainOptions,
    noise: Optional[NoiseSpec] = None,
) -> Tuple[DatasetSplit, Dict[str, Any]]:
    """
    Split and normalize raw samples; returns the split and a provenance record.

    With ``noise``, every raw window is corrupted before splitting, so both
    sides are noisy and the normalization statistics come from noisy
    training windows. Split membership depends only on the labels and
    ``options.seed``, so clean and noisy splits hold the same samples.
    """
    if noise is not None:
        samples = add_noise_to_samples(samples, noise)
    raw = split(samples, options.split_ratio, options.seed)
    return raw.normalized(), split_manifest(raw, source, options.split_ratio)


def prepare_split(
    data_root: Optional[str], options: TrainOptions, noise: Optional[NoiseSpec] = None
) -> Tuple[DatasetSplit, Dict[str, Any]]:
    """Load (or synthesize), optionally corrupt, split and normalize one run's samples."""
    samples, source = load_samples(data_root, options)
    return split_samples(samples, source, options, noise)


def _train_network(kind: ModelKind, split_: DatasetSplit, options: TrainOptions) -> ModelResult:
    debug("training", kind.value, "for", options.epochs, "epochs with seed", options.seed)
    model = build_model(model_config(options, split_), kind)
    _, metrics = train_loop(model, split_, options)
    return ModelResult(
        kind.value, options.seed, metrics.train_accuracy[-1], metrics.accuracy, metrics
    )


def _fmt(value: float) -> str:
    return f"{value:.4f}"


def run_table1(
    data_root: Optional[str],
    options: TrainOptions,
    prepared: Optional[Tuple[DatasetSplit, Dict[str, Any]]] = None,
) -> ExperimentReport:
    """Logistic regression, random forest, CNN and DRSN on one shared split."""
    split_, dataset = prepared or prepare_split(data_root, options)
    x_train, y_train = feature_matrix(split_.train, options.features)
    x_test, y_test = feature_matrix(split_.test, options.features)
    results = []

    debug("training logistic regression")
    lr_model = lr_train(
        x_train,
        y_train,
        lr=options.lr_learning_rate,
        epochs=options.lr_epochs,
        seed=options.seed,
        l2=options.lr_l2,
        num_classes=NUM_GESTURES,
    )
    debug("training random forest")
    rf_model = rf_train(
        x_train,
        y_train,
        num_trees=options.rf_trees,
        max_depth=options.rf_max_depth,
        seed=options.seed,
        workers=options.rf_workers,
        num_classes=NUM_GESTURES,
    )
    for name, baseline in (("logistic_regression", lr_model), ("random_forest", rf_model)):
        results.append(
            ModelResult(
                name,
                options.seed,
                float(np.mean(predict(baseline, x_train) == y_train)),
                float(np.mean(predict(baseline, x_test) == y_test)),
            )
        )
    results.append(_train_network(ModelKind.cnn, split_, options))
    results.append(_train_network(ModelKind.drsn, split_, options))
    table = Table([r.name for r in results], [[_fmt(r.test_accuracy) for r in results]])
    return ExperimentReport(
        "table1",
        options,
        dataset["source"],
        dataset,
        table,
        results,
        curves={r.name: r.metrics for r in results if r.metrics is not None},
        primary="drsn",
    )


def run_table2(
    data_root: Optional[str],
    options: TrainOptions,
    epoch_list: Optional[Sequence[int]] = None,
    prepared: Optional[Tuple[DatasetSplit, Dict[str, Any]]] = None,
) -> ExperimentReport:
    """DRSN test accuracy for each epoch budget, same seed and split."""
    split_, dataset = prepared or prepare_split(data_root, options)
    budgets = list(epoch_list if epoch_list is not None else options.epoch_list)
    results = []
    for epochs in budgets:
        result = _train_network(ModelKind.drsn, split_, options.overlay(epochs=epochs))
        result.name = f"drsn_{epochs}_epochs"
        results.append(result)
    table = Table(
        ["epochs", "test_accuracy"],
        [[str(e), _fmt(r.test_accuracy)] for e, r in zip(budgets, results)],
    )
    return ExperimentReport(
        "table2",
        options,
        dataset["source"],
        dataset,
        table,
        results,
        curves={r.name: r.metrics for r in results if r.metrics is not None},
        primary=results[0].name,
    )


def run_table3(
    data_root: Optional[str],
    options: TrainOptions,
    noise: Optional[NoiseSpec] = None,
    raw: Optional[Tuple[Sequence[GestureSample], str]] = None,
) -> ExperimentReport:
    """
    DRSN trained and evaluated on clean data versus on noise-corrupted data.

    Seeds ``options.seed .. options.seed + noise_seeds - 1`` vary the weight
    initialization, the shuffling and the noise draw. Each noisy run
    corrupts the raw windows before splitting and normalizing, so its train
    and test sides are both noisy; split membership is the same for every
    run. Spread is the population standard deviation across seeds.
    """
    samples, source = raw or load_samples(data_root, options)
    clean_split, dataset = split_samples(samples, source, options)
    base_noise = noise or options.noise_spec()
    seeds = list(range(options.seed, options.seed + options.noise_seeds))
    results = []
    curves = {}
    for condition in ("clean", "noisy"):
        for seed in seeds:
            run_options = options.overlay(seed=seed)
            split_ = clean_split
            if condition == "noisy":
                run_noise = NoiseSpec(base_noise.kind, base_noise.snr_db, seed)
                split_, _ = split_samples(samples, source, options, run_noise)
            result = _train_network(ModelKind.drsn, split_, run_options)
            result.name = f"drsn_{condition}"
            results.append(result)
            if seed == seeds[0] and result.metrics is not None:
                curves[result.name] = result.metrics
    rows = []
    for condition in ("clean", "noisy"):
        chosen = [r for r in results if r.name == f"drsn_{condition}"]
        train = np.array([r.train_accuracy for r in chosen])
        val = np.array([r.test_accuracy for r in chosen])
        rows.append(
            [
                condition,
                _fmt(train.mean()),
                _fmt(train.std()),
                _fmt(val.mean()),
                _fmt(val.std()),
            ]
        )
    dataset = dict(dataset, noise={"kind": base_noise.kind.value, "snr_db": base_noise.snr_db})
    table = Table(
        ["condition", "train_accuracy", "train_spread", "validation_accuracy", "validation_spread"],
        rows,
    )
    return ExperimentReport(
        "table3", options, dataset["source"], dataset, table, results, curves, "drsn_clean"
    )
