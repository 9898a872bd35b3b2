import enum
import re
from dataclasses import dataclass, fields, replace
from typing import Any, Callable, Dict, Mapping, Optional, Tuple, Type, get_type_hints

import numpy as np

from shrinknet.util import ConfigurationError


class OptimizerKind(enum.Enum):
    adam = "adam"
    sgd = "sgd"

    def __repr__(self):
        return f"OptimizerKind.{self.name}"


class ShrinkageMode(enum.Enum):
    """One threshold per sample (``cs``) or one per channel per sample (``cw``)."""

    cs = "cs"
    cw = "cw"

    def __repr__(self):
        return f"ShrinkageMode.{self.name}"


class NoiseKind(enum.Enum):
    gaussian = "gaussian"
    pink = "pink"
    laplacian = "laplacian"

    def __repr__(self):
        return f"NoiseKind.{self.name}"


class FeatureMode(enum.Enum):
    flatten_decim = "flatten_decim"
    timedomain = "timedomain"

    def __repr__(self):
        return f"FeatureMode.{self.name}"


class SegmentMethod(enum.Enum):
    equal = "equal"
    energy = "energy"

    def __repr__(self):
        return f"SegmentMethod.{self.name}"


class Precision(enum.Enum):
    float64 = "float64"
    float32 = "float32"

    def __repr__(self):
        return f"Precision.{self.name}"

    @property
    def dtype(self) -> Type[np.floating]:
        return np.float64 if self is Precision.float64 else np.float32


def parse_enum(enum_type: Type[enum.Enum], argstr: str) -> Any:
    """
    Look up an enum member by value, ignoring case and surrounding space.

    >>> parse_enum(ShrinkageMode, " CW ")
    ShrinkageMode.cw
    """
    try:
        return enum_type(argstr.strip().lower())
    except ValueError:
        raise ValueError(
            f"{argstr!r} is not one of: "
            + ", ".join(str(m.value) for m in enum_type)  # type: ignore
        )


def _parse_bool(argstr: str) -> Optional[bool]:
    match = re.fullmatch(r"(1|true|y(?:es)?)|(0|false|no?)", argstr, re.I)
    if match:
        yes, _no = match.groups()
        return bool(yes)
    return None


def _parse_int_tuple(argstr: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in argstr.split(",") if part.strip())


@dataclass
class TrainOptionSet:
    """
    Encodes some set of partially-specified options.

    This class is used while parsing options from the command line and from
    saved run records. It mirrors `TrainOptions` (which is used while running)
    but allows None everywhere so that option sets can override each other.
    """

    optimizer: Optional[OptimizerKind] = None
    learning_rate: Optional[float] = None
    momentum: Optional[float] = None
    batch_size: Optional[int] = None
    epochs: Optional[int] = None
    seed: Optional[int] = None
    precision: Optional[Precision] = None
    mode: Optional[ShrinkageMode] = None
    subjects: Optional[int] = None
    split_ratio: Optional[float] = None
    segment_method: Optional[SegmentMethod] = None
    allow_truncation: Optional[bool] = None
    noise_kind: Optional[NoiseKind] = None
    snr_db: Optional[float] = None
    noise_seeds: Optional[int] = None
    epoch_list: Optional[Tuple[int, ...]] = None
    features: Optional[FeatureMode] = None
    lr_learning_rate: Optional[float] = None
    lr_epochs: Optional[int] = None
    lr_l2: Optional[float] = None
    rf_trees: Optional[int] = None
    rf_max_depth: Optional[int] = None
    rf_workers: Optional[int] = None
    synthetic: Optional[bool] = None
    synthetic_per_class: Optional[int] = None
    synthetic_width: Optional[int] = None

    def overlay(self, overrides: "TrainOptionSet") -> "TrainOptionSet":
        kw = {k: v for (k, v) in overrides.__dict__.items() if v is not None}
        return replace(self, **kw)

    @classmethod
    def parser_for(cls, field: str) -> Optional[Callable[[str], Any]]:
        hints = get_type_hints(TrainOptions)
        if field not in hints:
            return None
        ctor = hints[field]
        if ctor is bool:
            return _parse_bool
        if isinstance(ctor, type) and issubclass(ctor, enum.Enum):
            return lambda s: parse_enum(ctor, s)
        if field == "epoch_list":
            return _parse_int_tuple
        return ctor

    @classmethod
    def parse_field(cls, field: str, strval: str) -> Any:
        parser = cls.parser_for(field)
        if parser is None:
            return None
        try:
            return parser(strval)
        except ValueError:
            return None


def option_set_from_dict(source: Mapping[str, object]) -> TrainOptionSet:
    """Lift recognized, non-None entries (e.g. ``vars(argparse_namespace)``)."""
    options = TrainOptionSet()
    for field in fields(TrainOptionSet):
        arg_val = source.get(field.name, None)
        if arg_val is not None:
            setattr(options, field.name, arg_val)
    return options


@dataclass
class TrainOptions:
    """Encodes the options for use while training and running experiments."""

    optimizer: OptimizerKind
    learning_rate: float
    momentum: float
    batch_size: int
    epochs: int
    seed: int
    precision: Precision
    mode: ShrinkageMode
    subjects: int
    split_ratio: float
    segment_method: SegmentMethod
    allow_truncation: bool
    noise_kind: NoiseKind
    snr_db: float
    noise_seeds: int
    epoch_list: Tuple[int, ...]
    features: FeatureMode
    lr_learning_rate: float
    lr_epochs: int
    lr_l2: float
    rf_trees: int
    rf_max_depth: int
    rf_workers: int
    synthetic: bool
    synthetic_per_class: int
    synthetic_width: int

    def overlay(
        self, overrides: Optional[TrainOptionSet] = None, **kw
    ) -> "TrainOptions":
        if overrides is not None:
            assert not kw
            kw = overrides.__dict__
        kw = {k: v for (k, v) in kw.items() if v is not None}
        ret = replace(self, **kw)
        assert type(ret) is TrainOptions
        return ret

    def validate(self) -> "TrainOptions":
        """
        Raise ConfigurationError naming the first out-of-range field.

        post: _ is self
        """
        positive_ints = (
            "batch_size",
            "epochs",
            "subjects",
            "noise_seeds",
            "lr_epochs",
            "rf_trees",
            "rf_max_depth",
            "rf_workers",
            "synthetic_per_class",
            "synthetic_width",
        )
        for name in positive_ints:
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(name, f"must be a positive integer, got {value!r}")
        for name in ("learning_rate", "lr_learning_rate"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ConfigurationError(name, f"must be a positive number, got {value!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum", "must lie in [0, 1)")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigurationError("split_ratio", "must lie strictly between 0 and 1")
        if self.lr_l2 < 0:
            raise ConfigurationError("lr_l2", "must be non-negative")
        if np.isnan(self.snr_db):
            raise ConfigurationError("snr_db", "must be a number")
        if not self.epoch_list or any(e < 1 for e in self.epoch_list):
            raise ConfigurationError("epoch_list", "must list positive epoch counts")
        return self

    def noise_spec(self, seed: Optional[int] = None):
        from shrinknet.data import NoiseSpec

        return NoiseSpec(
            kind=self.noise_kind,
            snr_db=self.snr_db,
            seed=self.seed if seed is None else seed,
        )

    def to_record(self) -> Dict[str, Any]:
        """JSON-ready field values; enums by value, tuples as lists."""
        record: Dict[str, Any] = {}
        for field in fields(self):
            value = getattr(self, field.name)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            record[field.name] = value
        return record


DEFAULT_OPTIONS = TrainOptions(
    optimizer=OptimizerKind.adam,
    learning_rate=1e-3,
    momentum=0.9,
    batch_size=32,
    epochs=18,
    seed=0,
    precision=Precision.float64,
    mode=ShrinkageMode.cw,
    subjects=9,
    split_ratio=0.8,
    segment_method=SegmentMethod.equal,
    allow_truncation=False,
    noise_kind=NoiseKind.gaussian,
    snr_db=5.0,
    noise_seeds=3,
    epoch_list=(18, 31),
    features=FeatureMode.timedomain,
    lr_learning_rate=0.1,
    lr_epochs=500,
    lr_l2=0.0,
    rf_trees=100,
    rf_max_depth=12,
    rf_workers=1,
    synthetic=False,
    synthetic_per_class=50,
    synthetic_width=1200,
)
