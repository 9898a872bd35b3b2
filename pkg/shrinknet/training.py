"""
Mini-batch training and evaluation of the tensor-core networks.
"""

import time
from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from typing_extensions import Protocol

from shrinknet.checkpoint import save_checkpoint
from shrinknet.data import DatasetSplit, GestureSample, stack_samples
from shrinknet.layers import softmax_cross_entropy
from shrinknet.optim import Optimizer
from shrinknet.options import TrainOptions
from shrinknet.tensor import Tape, Tensor, backward
from shrinknet.util import ConfigurationError, ContractError, DivergenceError, debug


class Classifier(Protocol):
    def forward(self, x: Tensor) -> Tensor:
        ...

    def eval(self) -> Any:
        ...


def confusion_matrix(
    labels: Sequence[int], predictions: Sequence[int], num_classes: int
) -> np.ndarray:
    """``[true, predicted]`` counts."""
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (np.asarray(labels), np.asarray(predictions)), 1)
    return matrix


def accuracy_of(confusion: np.ndarray) -> float:
    total = confusion.sum()
    return float(np.trace(confusion) / total) if total else 0.0


@dataclass
class Evaluation:
    loss: float
    confusion: np.ndarray

    @property
    def accuracy(self) -> float:
        return accuracy_of(self.confusion)


@dataclass
class Metrics:
    """
    Per-epoch training curves plus the final held-out confusion matrix.

    Train figures are running averages over the epoch's mini-batches (train
    mode); validation figures come from an eval-mode pass after the epoch.
    ``seconds`` is wall-clock time and is the only non-deterministic field.
    """

    num_classes: int
    train_loss: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    confusion: Optional[np.ndarray] = None
    steps: int = 0
    seconds: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def accuracy(self) -> float:
        """Final held-out accuracy, ``trace(confusion) / sum(confusion)``."""
        return accuracy_of(self.confusion) if self.confusion is not None else 0.0

    def record_epoch(
        self, train_loss: float, train_accuracy: float, validation: Evaluation
    ) -> None:
        self.train_loss.append(train_loss)
        self.train_accuracy.append(train_accuracy)
        self.val_loss.append(validation.loss)
        self.val_accuracy.append(validation.accuracy)
        self.confusion = validation.confusion


def _model_dtype(model: Any):
    return getattr(model, "dtype", np.float64)


def evaluate(
    model: Classifier, samples: Sequence[GestureSample], batch_size: int = 64
) -> Evaluation:
    """
    Eval-mode loss and confusion matrix over ``samples``.

    Works for any object with ``forward`` and ``eval``; batch normalization
    layers use their running statistics.

    pre: len(samples) > 0
    """
    if not samples:
        raise ContractError("cannot evaluate on an empty sample list")
    model.eval()
    windows, labels = stack_samples(samples)
    total_loss = 0.0
    predictions = []
    num_classes = 0
    for start in range(0, len(labels), batch_size):
        x = Tensor(windows[start : start + batch_size], dtype=_model_dtype(model))
        y = labels[start : start + batch_size]
        logits = model.forward(x)
        num_classes = logits.shape[1]
        total_loss += softmax_cross_entropy(logits, y).item() * len(y)
        predictions.append(np.argmax(logits.values, axis=1))
    return Evaluation(
        total_loss / len(labels),
        confusion_matrix(labels, np.concatenate(predictions), num_classes),
    )


def batch_slices(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    """
    Consecutive mini-batches of ``order``.

    A trailing batch of a single sample is merged into the one before it, as
    train-mode batch normalization needs at least two samples.
    """
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def _write_last_good(
    model: Any, state: Optional[dict], path: Optional[str], error: DivergenceError
) -> None:
    if path is None or state is None or not hasattr(model, "load_state_dict"):
        return
    model.load_state_dict(state)
    save_checkpoint(model, path)
    error.checkpoint_path = path
    debug("wrote last good checkpoint to", path)


def train_loop(
    model: Any,
    split: DatasetSplit,
    options: TrainOptions,
    checkpoint_path: Optional[str] = None,
) -> Tuple[Any, Metrics]:
    """
    Train ``model`` in place; returns the model and its metrics.

    Epoch ``e`` shuffles the training set with the generator seeded by
    ``[options.seed, e]`` and takes ``ceil(N / batch_size)`` optimizer steps,
    one fewer when ``N % batch_size == 1`` (see batch_slices). If the loss or
    a gradient becomes non-finite, a DivergenceError is raised; when
    ``checkpoint_path`` is given the model is first rolled back to the end of
    the last good epoch and written there.
    """
    if options.epochs < 1:
        raise ConfigurationError("epochs", f"must be at least 1, got {options.epochs}")
    if options.batch_size < 1:
        raise ConfigurationError("batch_size", f"must be positive, got {options.batch_size}")
    if not split.train or not split.test:
        raise ContractError("training needs non-empty train and test sides")
    windows, labels = stack_samples(split.train)
    dtype = _model_dtype(model)
    optimizer = Optimizer(dict(model.named_parameters()), options)
    tape = Tape()
    metrics: Optional[Metrics] = None
    last_good_state = model.state_dict() if hasattr(model, "state_dict") else None
    last_good_epoch: Optional[int] = None
    started = time.perf_counter()
    steps = 0
    for epoch in range(1, options.epochs + 1):
        order = np.random.default_rng([options.seed, epoch]).permutation(len(labels))
        model.train()
        loss_sum = 0.0
        correct = 0
        for batch in batch_slices(order, options.batch_size):
            with tape.recording():
                logits = model.forward(Tensor(windows[batch], dtype=dtype))
                loss = softmax_cross_entropy(logits, labels[batch])
            loss_value = loss.item()
            try:
                if not np.isfinite(loss_value):
                    raise DivergenceError(
                        f"training loss became {loss_value} in epoch {epoch}; "
                        f"try a smaller learning rate than {options.learning_rate}"
                    )
                backward(loss, tape)
                optimizer.step()
            except DivergenceError as exc:
                tape.clear()
                exc.last_good_epoch = last_good_epoch
                _write_last_good(model, last_good_state, checkpoint_path, exc)
                raise
            steps += 1
            loss_sum += loss_value * len(batch)
            correct += int(np.sum(np.argmax(logits.values, axis=1) == labels[batch]))
        validation = evaluate(model, split.test)
        if metrics is None:
            metrics = Metrics(validation.confusion.shape[0])
        metrics.record_epoch(loss_sum / len(labels), correct / len(labels), validation)
        last_good_epoch = epoch
        if last_good_state is not None:
            last_good_state = model.state_dict()
        debug(
            f"epoch {epoch}/{options.epochs} loss {metrics.train_loss[-1]:.4f} "
            f"train acc {metrics.train_accuracy[-1]:.3f} "
            f"val loss {validation.loss:.4f} val acc {validation.accuracy:.3f}"
        )
    assert metrics is not None
    metrics.steps = steps
    metrics.seconds = time.perf_counter() - started
    return model, metrics
