"""
Classical comparison models: multinomial logistic regression and a random forest.

Both consume fixed-length feature vectors produced by `extract_features`
and break prediction ties toward the lower label.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from shrinknet.data import GestureSample
from shrinknet.options import FeatureMode
from shrinknet.util import ContractError, DimensionError, DivergenceError, debug

DECIMATION = 8
TIME_DOMAIN_FEATURES = ("mav", "rms", "wl", "zc")


@dataclass
class FeatureVector:
    values: np.ndarray
    label: int


def time_domain_features(window: np.ndarray) -> np.ndarray:
    """
    Per-channel mean absolute value, RMS, waveform length and zero crossings.

    The result is laid out feature-major: all MAV values first, then RMS, etc.
    """
    mav = np.mean(np.abs(window), axis=1)
    rms = np.sqrt(np.mean(window**2, axis=1))
    wl = np.sum(np.abs(np.diff(window, axis=1)), axis=1)
    zc = np.sum(window[:, :-1] * window[:, 1:] < 0, axis=1).astype(np.float64)
    return np.concatenate([mav, rms, wl, zc])


def extract_features(
    sample: GestureSample, mode: FeatureMode = FeatureMode.timedomain
) -> FeatureVector:
    window = np.asarray(sample.window, dtype=np.float64)
    if window.ndim != 2:
        raise DimensionError(f"expected a [channels, width] window, got shape {window.shape}")
    if mode is FeatureMode.flatten_decim:
        values = window[:, ::DECIMATION].reshape(-1)
    else:
        values = time_domain_features(window)
    return FeatureVector(np.ascontiguousarray(values), sample.label)


def feature_matrix(
    samples: Sequence[GestureSample], mode: FeatureMode = FeatureMode.timedomain
) -> Tuple[np.ndarray, np.ndarray]:
    """``([n, dim], [n])`` features and labels; every row has the same dimension."""
    vectors = [extract_features(s, mode) for s in samples]
    if not vectors:
        raise ContractError("no samples to extract features from")
    dims = {len(v.values) for v in vectors}
    if len(dims) != 1:
        raise DimensionError(f"feature vectors have differing dimensions {sorted(dims)}")
    return (
        np.stack([v.values for v in vectors]),
        np.array([v.label for v in vectors], dtype=np.int64),
    )


def _as_labels(labels: Sequence[int], rows: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (rows,):
        raise DimensionError(f"{rows} feature rows but labels of shape {y.shape}")
    if rows and y.min() < 0:
        raise ContractError("labels must be non-negative")
    return y


def _as_matrix(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DimensionError(f"expected a non-empty [n, dim] feature matrix, got shape {x.shape}")
    return x


@dataclass
class LogisticRegressionModel:
    """
    Softmax regression on standardized features.

    ``feature_mean``/``feature_scale`` are learned from the training features
    and applied before ``weights`` (``[num_classes, dim]``) and ``bias``.
    """

    weights: np.ndarray
    bias: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    loss_history: List[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.feature_mean) / self.feature_scale

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.standardize(features) @ self.weights.T + self.bias


def lr_loss_and_grad(
    weights: np.ndarray,
    bias: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    l2: float = 0.0,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy plus ``l2 / 2 * ||weights||^2``, with its gradients."""
    logits = features @ weights.T + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = features.shape[0]
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean() + 0.5 * l2 * float(np.sum(weights**2))
    delta = np.exp(log_probs)
    delta[rows, labels] -= 1.0
    delta /= n
    return float(loss), delta.T @ features + l2 * weights, delta.sum(axis=0)


def lr_train(
    features: np.ndarray,
    labels: Sequence[int],
    lr: float = 0.1,
    epochs: int = 500,
    seed: int = 0,
    l2: float = 0.0,
    num_classes: Optional[int] = None,
) -> LogisticRegressionModel:
    """
    Full-batch gradient descent on softmax cross-entropy.

    pre: epochs >= 1
    """
    x = _as_matrix(features)
    y = _as_labels(labels, x.shape[0])
    if len(np.unique(y)) < 2:
        raise ContractError("logistic regression needs at least 2 classes in the training labels")
    k = int(y.max()) + 1 if num_classes is None else num_classes
    if y.max() >= k:
        raise ContractError(f"labels must lie in 0..{k - 1}")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    scale = np.where(std > 1e-12, std, 1.0)
    xs = (x - mean) / scale
    rng = np.random.default_rng(seed)
    weights = rng.normal(scale=0.01, size=(k, x.shape[1]))
    bias = np.zeros(k)
    history = []
    for epoch in range(epochs):
        loss, grad_w, grad_b = lr_loss_and_grad(weights, bias, xs, y, l2)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"logistic regression loss became {loss} at epoch {epoch + 1}; "
                f"try a smaller learning rate than {lr}",
                last_good_epoch=epoch if epoch else None,
            )
        history.append(loss)
        weights = weights - lr * grad_w
        bias = bias - lr * grad_b
    debug("logistic regression final loss", history[-1] if history else None)
    return LogisticRegressionModel(weights, bias, mean, scale, history)


@dataclass
class DecisionTree:
    """
    A CART tree stored as parallel node arrays; node 0 is the root.

    Leaves have ``feature == -1``. Internal nodes send ``x[feature] <=
    threshold`` to ``left`` and everything else to ``right``. ``label`` is the
    majority class of the training rows that reached each node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    label: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depths = np.zeros(self.node_count, dtype=np.int64)
        for node in range(self.node_count):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def predict(self, features: np.ndarray) -> np.ndarray:
        node = np.zeros(features.shape[0], dtype=np.int64)
        rows = np.arange(features.shape[0])
        active = self.feature[node] >= 0
        while active.any():
            current = node[active]
            go_left = (
                features[rows[active], self.feature[current]] <= self.threshold[current]
            )
            node[active] = np.where(go_left, self.left[current], self.right[current])
            active = self.feature[node] >= 0
        return self.label[node]


def gini(counts: Sequence[int]) -> float:
    """
    Gini impurity of a node with the given class counts.

    >>> gini([4, 0]), gini([2, 2])
    (0.0, 0.5)
    """
    arr = np.asarray(counts, dtype=np.float64)
    total = arr.sum()
    if total == 0:
        return 0.0
    return float(1.0 - np.sum((arr / total) ** 2))


def _best_split_on(
    column: np.ndarray, y: np.ndarray, num_classes: int
) -> Optional[Tuple[float, float]]:
    """(weighted child impurity, threshold) of the best split of one feature."""
    order = np.argsort(column, kind="stable")
    xs = column[order]
    valid = np.nonzero(xs[:-1] < xs[1:])[0]
    if len(valid) == 0:
        return None
    onehot = np.zeros((len(y), num_classes))
    onehot[np.arange(len(y)), y[order]] = 1.0
    left = np.cumsum(onehot, axis=0)[valid]
    right = onehot.sum(axis=0) - left
    n_left = (valid + 1).astype(np.float64)
    n_right = len(y) - n_left
    impurity_left = 1.0 - np.sum((left / n_left[:, None]) ** 2, axis=1)
    impurity_right = 1.0 - np.sum((right / n_right[:, None]) ** 2, axis=1)
    weighted = (n_left * impurity_left + n_right * impurity_right) / len(y)
    best = int(np.argmin(weighted))
    lo, hi = xs[valid[best]], xs[valid[best] + 1]
    threshold = lo + (hi - lo) / 2.0
    if not lo <= threshold < hi:
        threshold = lo
    return float(weighted[best]), float(threshold)


def grow_tree(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    max_depth: Optional[int],
    max_features: int,
    rng: np.random.Generator,
) -> DecisionTree:
    """
    Grow one CART tree greedily by Gini impurity.

    At each node ``max_features`` randomly chosen features are searched; if
    none of them can split the node, the remaining features are tried in the
    same random order.
    """
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    label: List[int] = []
    dim = features.shape[1]
    pending = [(np.arange(len(labels)), 0, -1, False)]
    while pending:
        rows, depth, parent, is_right = pending.pop()
        node = len(feature)
        if parent >= 0:
            (right if is_right else left)[parent] = node
        y = labels[rows]
        counts = np.bincount(y, minlength=num_classes)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        label.append(int(np.argmax(counts)))
        if np.count_nonzero(counts) < 2 or (max_depth is not None and depth >= max_depth):
            continue
        best: Optional[Tuple[float, int, float]] = None
        candidates = rng.permutation(dim)
        for position, f in enumerate(candidates):
            if position >= max_features and best is not None:
                break
            found = _best_split_on(features[rows, f], y, num_classes)
            if found is not None and (best is None or found[0] < best[0]):
                best = (found[0], int(f), found[1])
        if best is None:
            continue
        _, f, thr = best
        feature[node] = f
        threshold[node] = thr
        goes_left = features[rows, f] <= thr
        pending.append((rows[~goes_left], depth + 1, node, True))
        pending.append((rows[goes_left], depth + 1, node, False))
    return DecisionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(label, dtype=np.int64),
    )


_MASK64 = (1 << 64) - 1


def splitmix64(value: int) -> int:
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def tree_seed(seed: int, index: int) -> int:
    """Seed of tree ``index``: ``splitmix64(splitmix64(seed) + index)``."""
    return splitmix64((splitmix64(seed & _MASK64) + index) & _MASK64)


@dataclass
class RandomForestModel:
    trees: List[DecisionTree]
    max_features: int
    tree_seeds: List[int]
    num_classes: int
    dim: int

    def votes(self, features: np.ndarray) -> np.ndarray:
        return np.stack([tree.predict(features) for tree in self.trees])


def majority_vote(votes: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-column most frequent label of ``[trees, n]`` votes, ties to the lower label."""
    counts = np.zeros((votes.shape[1], num_classes), dtype=np.int64)
    for row in votes:
        counts[np.arange(votes.shape[1]), row] += 1
    return np.argmax(counts, axis=1)


def rf_train(
    features: np.ndarray,
    labels: Sequence[int],
    num_trees: int = 100,
    max_depth: Optional[int] = 12,
    seed: int = 0,
    max_features: Optional[int] = None,
    bootstrap: bool = True,
    workers: int = 1,
    num_classes: Optional[int] = None,
) -> RandomForestModel:
    """
    Bagged CART trees voting by majority.

    ``max_features`` defaults to ``floor(sqrt(dim))``. Trees are grown from
    independent per-tree seeds, so the forest does not depend on ``workers``.
    """
    x = _as_matrix(features)
    y = _as_labels(labels, x.shape[0])
    if num_trees < 1:
        raise ContractError("a forest needs at least one tree")
    k = int(y.max()) + 1 if num_classes is None else num_classes
    if y.max() >= k:
        raise ContractError(f"labels must lie in 0..{k - 1}")
    m = max(1, int(np.sqrt(x.shape[1]))) if max_features is None else max_features
    m = min(max(m, 1), x.shape[1])
    seeds = [tree_seed(seed, i) for i in range(num_trees)]

    def grow(tree_index: int) -> DecisionTree:
        rng = np.random.default_rng(seeds[tree_index])
        rows = rng.integers(0, len(y), size=len(y)) if bootstrap else np.arange(len(y))
        return grow_tree(x[rows], y[rows], k, max_depth, m, rng)

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        trees = list(pool.map(grow, range(num_trees)))
    debug("grew", num_trees, "trees; mean node count", np.mean([t.node_count for t in trees]))
    return RandomForestModel(trees, m, seeds, k, x.shape[1])


BaselineModel = Union[LogisticRegressionModel, RandomForestModel]


def predict(model: BaselineModel, features: np.ndarray) -> np.ndarray:
    """
    Predicted labels for ``[n, dim]`` features (or a single ``[dim]`` vector).

    Ties go to the lower label index.
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise DimensionError(
            f"model was trained on {model.dim} features, got input of shape {np.shape(features)}"
        )
    if isinstance(model, LogisticRegressionModel):
        result = np.argmax(model.logits(x), axis=1)
    else:
        result = majority_vote(model.votes(x), model.num_classes)
    return result[0] if single else result
