"""
sEMG recordings: ingestion, segmentation, splitting, normalization and noise.

A dataset lives on disk as ``<root>/<subject>/<gesture_label>.txt``: one file
per subject and gesture, one line per timestep, 8 whitespace- or
comma-separated values per line (one per armband electrode), sampled at
200 Hz for one minute.
"""

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from glob import glob
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from shrinknet.options import NoiseKind, SegmentMethod
from shrinknet.util import (
    ContractError,
    DataError,
    RecordingParseError,
    StratificationError,
    debug,
    warn,
)

NUM_CHANNELS = 8
NUM_GESTURES = 8
SAMPLING_HZ = 200
RECORDING_STEPS = SAMPLING_HZ * 60
SAMPLES_PER_RECORDING = 10
GESTURE_NAMES = (
    "hibernation",
    "flexion",
    "extension",
    "radial deviation",
    "ulnar deviation",
    "pronation",
    "supination",
    "fist",
)
DEFAULT_PATTERN = "*/*.txt"
EXPECTED_LAYOUT = (
    "<root>/<subject>/<gesture_label>.txt with one line per timestep and "
    f"{NUM_CHANNELS} numeric columns per line"
)

_TOKEN_SPLIT = re.compile(r"[,\s]+")


@dataclass
class Recording:
    """
    One subject performing one gesture: ``channels`` is ``[8, timesteps]``.

    ``truncated`` marks recordings whose length differs from the full minute
    and was accepted anyway.
    """

    channels: np.ndarray
    subject_id: int
    gesture_label: int
    truncated: bool = False
    source: str = ""


@dataclass
class GestureSample:
    window: np.ndarray
    label: int
    subject_id: int


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class DatasetSplit:
    """
    A stratified train/test partition.

    ``stats`` are per-channel statistics of the (unnormalized) training
    windows only. The test side doubles as the validation set.
    """

    train: List[GestureSample]
    test: List[GestureSample]
    stats: NormalizationStats
    seed: int

    def normalized(self) -> "DatasetSplit":
        return replace(
            self,
            train=[normalize(s, self.stats) for s in self.train],
            test=[normalize(s, self.stats) for s in self.test],
        )


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.gaussian
    snr_db: float = 5.0
    seed: int = 0


def stack_samples(samples: Sequence[GestureSample]) -> Tuple[np.ndarray, np.ndarray]:
    """``([n, channels, width], [n])`` arrays of windows and labels."""
    if not samples:
        raise ContractError("no samples to stack")
    windows = np.stack([s.window for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return windows, labels


def load_recording(
    path: str,
    subject_id: int,
    gesture_label: int,
    expected_steps: int = RECORDING_STEPS,
    allow_truncation: bool = False,
) -> Recording:
    """
    Parse one recording file.

    Blank lines are ignored; every other line must hold exactly 8 numbers.
    With ``allow_truncation`` a recording of any positive length is accepted
    (cut to ``expected_steps`` if longer) and flagged as truncated.
    """
    if not 0 <= gesture_label < NUM_GESTURES:
        raise DataError(f"{path}: gesture label {gesture_label} is outside 0..{NUM_GESTURES - 1}")
    try:
        with open(path, "r") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read recording {path}: {exc.strerror}")
    rows: List[List[float]] = []
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        tokens = _TOKEN_SPLIT.split(stripped)
        if len(tokens) != NUM_CHANNELS:
            raise RecordingParseError(
                path, lineno, f"expected {NUM_CHANNELS} values, found {len(tokens)}"
            )
        try:
            rows.append([float(tok) for tok in tokens])
        except ValueError:
            bad = next(tok for tok in tokens if not _is_number(tok))
            raise RecordingParseError(path, lineno, f"non-numeric token {bad!r}")
    if not rows:
        raise RecordingParseError(path, 1, "file contains no samples")
    channels = np.array(rows, dtype=np.float64).T
    truncated = False
    if channels.shape[1] != expected_steps:
        if not allow_truncation:
            raise RecordingParseError(
                path,
                len(lines),
                f"expected {expected_steps} lines of samples, found {channels.shape[1]}",
            )
        channels = channels[:, :expected_steps]
        truncated = True
    if not np.all(np.isfinite(channels)):
        raise DataError(f"{path}: recording contains non-finite values")
    return Recording(
        np.ascontiguousarray(channels), subject_id, gesture_label, truncated, path
    )


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _energy_envelope(channels: np.ndarray, span: int) -> np.ndarray:
    energy = np.abs(channels).sum(axis=0)
    kernel = np.ones(max(span, 1)) / max(span, 1)
    return np.convolve(energy, kernel, mode="same")


def segment(
    recording: Recording,
    samples_per_recording: int = SAMPLES_PER_RECORDING,
    method: SegmentMethod = SegmentMethod.equal,
) -> List[GestureSample]:
    """
    Cut a recording into labeled windows of ``timesteps // samples_per_recording``.

    The equal method yields contiguous, non-overlapping windows; window i
    covers ``[width * i, width * (i + 1))``. The energy method centers each
    window on the activity peak of the corresponding equal frame, which can
    make neighbouring windows overlap.
    """
    if samples_per_recording < 1:
        raise ContractError("samples_per_recording must be positive")
    steps = recording.channels.shape[1]
    if steps % samples_per_recording != 0 and not recording.truncated:
        raise ContractError(
            f"{steps} timesteps do not divide into {samples_per_recording} windows "
            "(load with truncation allowed to drop the remainder)"
        )
    width = steps // samples_per_recording
    if width < 1:
        raise ContractError(f"{steps} timesteps are too few for {samples_per_recording} windows")
    starts = [i * width for i in range(samples_per_recording)]
    if method is SegmentMethod.energy:
        envelope = _energy_envelope(recording.channels, max(width // 4, 1))
        starts = [
            int(np.clip(s + int(np.argmax(envelope[s : s + width])) - width // 2, 0, steps - width))
            for s in starts
        ]
    return [
        GestureSample(
            np.array(recording.channels[:, s : s + width]),
            recording.gesture_label,
            recording.subject_id,
        )
        for s in starts
    ]


def channel_stats(samples: Sequence[GestureSample]) -> NormalizationStats:
    windows, _ = stack_samples(samples)
    return NormalizationStats(windows.mean(axis=(0, 2)), windows.std(axis=(0, 2)))


def split(
    samples: Sequence[GestureSample], ratio: float = 0.8, seed: int = 0
) -> DatasetSplit:
    """
    Seeded, per-label stratified split.

    Each label contributes ``round(ratio * count)`` of its samples (halves
    rounded up) to the training side; both sides keep the shuffled order.
    """
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"split ratio must lie strictly between 0 and 1, got {ratio}")
    if not samples:
        raise ContractError("cannot split an empty sample list")
    order = np.random.default_rng(seed).permutation(len(samples))
    train_ids = set()
    for label in sorted({s.label for s in samples}):
        members = [i for i in order if samples[i].label == label]
        n_train = int(np.floor(ratio * len(members) + 0.5))
        if n_train == 0:
            raise StratificationError(
                f"label {label} has {len(members)} samples; none would be used for training "
                f"at ratio {ratio}"
            )
        train_ids.update(members[:n_train])
    train = [samples[i] for i in order if i in train_ids]
    test = [samples[i] for i in order if i not in train_ids]
    debug("split", len(samples), "samples into", len(train), "train and", len(test), "test")
    return DatasetSplit(train, test, channel_stats(train), seed)


def normalize(sample: GestureSample, stats: NormalizationStats) -> GestureSample:
    std = np.maximum(stats.std, 1e-8)
    window = (sample.window - stats.mean[:, None]) / std[:, None]
    return GestureSample(window, sample.label, sample.subject_id)


def _raw_noise(kind: NoiseKind, shape: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    if kind is NoiseKind.gaussian:
        return rng.standard_normal(shape)
    if kind is NoiseKind.laplacian:
        return rng.laplace(size=shape)
    # pink: shape white noise to a 1/f power spectrum, without a DC component
    white = rng.standard_normal(shape)
    spectrum = np.fft.rfft(white, axis=1)
    freqs = np.fft.rfftfreq(shape[1])
    scale = np.zeros_like(freqs)
    scale[1:] = 1.0 / np.sqrt(freqs[1:])
    return np.fft.irfft(spectrum * scale, n=shape[1], axis=1)


def add_noise(
    sample: GestureSample, spec: NoiseSpec, rng: Optional[np.random.Generator] = None
) -> GestureSample:
    """
    Add noise at exactly ``spec.snr_db`` decibels below each channel's power.

    A channel with zero power takes the whole window's power instead.
    """
    window = sample.window
    if not np.all(np.isfinite(window)):
        raise ContractError("cannot add noise to a window with non-finite values")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    power = np.mean(window**2, axis=1)
    power = np.where(power > 0, power, np.mean(window**2))
    target = power / (10.0 ** (spec.snr_db / 10.0))
    raw = _raw_noise(spec.kind, window.shape, rng)
    raw_power = np.mean(raw**2, axis=1)
    noise = raw * np.sqrt(target / np.where(raw_power > 0, raw_power, 1.0))[:, None]
    return GestureSample(window + noise, sample.label, sample.subject_id)


def add_noise_to_samples(
    samples: Sequence[GestureSample], spec: NoiseSpec
) -> List[GestureSample]:
    """Noisy copies, each drawn from its own stream derived from ``spec.seed``."""
    streams = np.random.SeedSequence(spec.seed).spawn(len(samples))
    return [add_noise(s, spec, np.random.default_rng(ss)) for s, ss in zip(samples, streams)]


def _class_signal(
    rng: np.random.Generator,
    label: int,
    num_classes: int,
    channels: int,
    steps: int,
    noise_std: float = 0.1,
) -> np.ndarray:
    base = 20.0 + 40.0 * label / max(num_classes - 1, 1)
    t = np.arange(steps) / SAMPLING_HZ
    dominant = {label % channels, (label + 3) % channels}
    out = np.empty((channels, steps))
    for c in range(channels):
        amp = (2.0 if c in dominant else 0.3) * rng.uniform(0.9, 1.1)
        freq = base * rng.uniform(0.9, 1.1)
        phase1, phase2 = rng.uniform(0, 2 * np.pi, size=2)
        out[c] = amp * (
            np.sin(2 * np.pi * freq * t + phase1)
            + 0.5 * np.sin(2 * np.pi * 1.5 * freq * t + phase2)
        )
    return out + rng.normal(scale=noise_std, size=out.shape)


def gen_synthetic(
    num_classes: int = NUM_GESTURES,
    samples_per_class: int = 20,
    width: int = 1200,
    seed: int = 0,
    channels: int = NUM_CHANNELS,
) -> List[GestureSample]:
    """
    Labeled windows of band-limited sinusoid mixtures.

    Class k oscillates between 20 and 60 Hz (plus a 1.5x harmonic, all below
    the 100 Hz Nyquist limit) with high amplitude on two class-specific
    channels, so per-channel energy alone separates the classes.
    """
    if min(num_classes, samples_per_class, width, channels) < 1:
        raise ContractError("synthetic dataset parameters must be positive")
    rng = np.random.default_rng(seed)
    return [
        GestureSample(_class_signal(rng, label, num_classes, channels, width), label, j % 10)
        for label in range(num_classes)
        for j in range(samples_per_class)
    ]


def write_synthetic_dataset(
    root: str,
    subjects: int = 3,
    timesteps: int = RECORDING_STEPS,
    seed: int = 0,
    gestures: int = NUM_GESTURES,
) -> List[str]:
    """
    Write synthetic integer recordings in the on-disk dataset layout.

    Subjects are numbered from 1 and differ by a per-subject gain.
    """
    rng = np.random.default_rng(seed)
    paths = []
    for subject in range(1, subjects + 1):
        gain = 20.0 * rng.uniform(0.8, 1.2)
        subject_dir = os.path.join(root, f"{subject:02d}")
        os.makedirs(subject_dir, exist_ok=True)
        for label in range(gestures):
            signal = _class_signal(rng, label, gestures, NUM_CHANNELS, timesteps) * gain
            values = np.clip(np.rint(signal), -128, 127).astype(np.int64).T
            path = os.path.join(subject_dir, f"{label}.txt")
            np.savetxt(path, values, fmt="%d", delimiter=" ")
            paths.append(path)
    debug("wrote", len(paths), "synthetic recordings under", root)
    return paths


def discover_recordings(
    root: str, pattern: str = DEFAULT_PATTERN
) -> List[Tuple[str, int, int]]:
    """``(path, subject_id, gesture_label)`` for every recording, sorted."""
    if not os.path.isdir(root):
        raise DataError(f"no dataset at {root!r}; expected {EXPECTED_LAYOUT}")
    found = []
    for path in glob(os.path.join(root, pattern)):
        subject_name = os.path.basename(os.path.dirname(path))
        stem = os.path.splitext(os.path.basename(path))[0]
        subject_match = re.search(r"\d+", subject_name)
        if subject_match is None or not stem.isdigit() or int(stem) >= NUM_GESTURES:
            warn("Ignoring file outside the dataset layout:", path)
            continue
        found.append((path, int(subject_match.group()), int(stem)))
    if not found:
        raise DataError(f"no recordings found under {root!r}; expected {EXPECTED_LAYOUT}")
    return sorted(found, key=lambda entry: (entry[1], entry[2], entry[0]))


def select_subjects(subject_ids: Sequence[int], count: Optional[int]) -> List[int]:
    """The first ``count`` distinct subject ids in sorted order (all when None)."""
    ordered = sorted(set(subject_ids))
    if count is None:
        return ordered
    if count < 1:
        raise ContractError("at least one subject must be selected")
    if count > len(ordered):
        warn(f"Requested {count} subjects but only {len(ordered)} are available")
    return ordered[:count]


def load_dataset(
    root: str,
    subjects: Optional[int] = None,
    pattern: str = DEFAULT_PATTERN,
    samples_per_recording: int = SAMPLES_PER_RECORDING,
    method: SegmentMethod = SegmentMethod.equal,
    expected_steps: int = RECORDING_STEPS,
    allow_truncation: bool = False,
    workers: int = 4,
) -> List[GestureSample]:
    """Load, segment and concatenate recordings in (subject, gesture) order."""
    entries = discover_recordings(root, pattern)
    keep = set(select_subjects([e[1] for e in entries], subjects))
    entries = [e for e in entries if e[1] in keep]

    def load(entry: Tuple[str, int, int]) -> List[GestureSample]:
        path, subject_id, label = entry
        debug("loading", path)
        recording = load_recording(path, subject_id, label, expected_steps, allow_truncation)
        return segment(recording, samples_per_recording, method)

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        per_file = list(pool.map(load, entries))
    samples = [s for chunk in per_file for s in chunk]
    debug("loaded", len(samples), "samples from", len(entries), "recordings")
    return samples


def save_split(split_: DatasetSplit, path: str) -> None:
    train_x, train_y = stack_samples(split_.train)
    test_x, test_y = stack_samples(split_.test)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            train_x=train_x,
            train_y=train_y,
            train_subject=np.array([s.subject_id for s in split_.train]),
            test_x=test_x,
            test_y=test_y,
            test_subject=np.array([s.subject_id for s in split_.test]),
            mean=split_.stats.mean,
            std=split_.stats.std,
            seed=np.array(split_.seed),
        )


def load_split(path: str) -> DatasetSplit:
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read prepared split {path}: {exc}")
    with archive:
        try:
            sides = []
            for side in ("train", "test"):
                x, y, subj = (archive[f"{side}_{k}"] for k in ("x", "y", "subject"))
                sides.append(
                    [GestureSample(x[i], int(y[i]), int(subj[i])) for i in range(len(y))]
                )
            stats = NormalizationStats(archive["mean"], archive["std"])
            seed = int(archive["seed"])
        except KeyError as exc:
            raise DataError(f"prepared split {path} lacks {exc}")
    return DatasetSplit(sides[0], sides[1], stats, seed)


def label_counts(samples: Sequence[GestureSample]) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for s in samples:
        counts[str(s.label)] = counts.get(str(s.label), 0) + 1
    return dict(sorted(counts.items()))


def split_manifest(split_: DatasetSplit, source: str, ratio: float) -> Dict[str, Any]:
    return {
        "source": source,
        "seed": split_.seed,
        "ratio": ratio,
        "train_count": len(split_.train),
        "test_count": len(split_.test),
        "train_labels": label_counts(split_.train),
        "test_labels": label_counts(split_.test),
        "subjects": sorted({s.subject_id for s in split_.train + split_.test}),
        "window": list(split_.train[0].window.shape),
        "normalization_mean": [float(v) for v in split_.stats.mean],
        "normalization_std": [float(v) for v in split_.stats.std],
    }


def write_manifest(path: str, record: Dict[str, Any]) -> None:
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
