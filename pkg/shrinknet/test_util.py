import pathlib
from typing import List, Tuple

import numpy as np

from shrinknet.layers import Module
from shrinknet.models import ModelConfig
from shrinknet.options import DEFAULT_OPTIONS, ShrinkageMode, TrainOptions
from shrinknet.tensor import Tensor


def simplefs(path: pathlib.Path, files: dict) -> None:
    for name, contents in files.items():
        subpath = path / name
        if isinstance(contents, str):
            with open(subpath, "w") as fh:
                fh.write(contents)
        elif isinstance(contents, dict):
            subpath.mkdir()
            simplefs(subpath, contents)
        else:
            raise Exception("bad input to simplefs")


def recording_text(rows: int, columns: int = 8, sep: str = " ", seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    values = rng.integers(-128, 128, size=(rows, columns))
    return "".join(sep.join(str(v) for v in row) + "\n" for row in values)


def toy_config(mode: ShrinkageMode = ShrinkageMode.cw, **kw) -> ModelConfig:
    """A two-stage network small enough for exhaustive gradient checks."""
    params = dict(
        input_channels=2,
        input_width=16,
        stem_channels=3,
        stage_channels=(3, 4),
        blocks_per_stage=(2, 1),
        num_classes=3,
        mode=mode,
        seed=1,
    )
    params.update(kw)
    return ModelConfig(**params)


def toy_batch(config: ModelConfig, batch: int = 4, seed: int = 0) -> Tuple[Tensor, List[int]]:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, config.input_channels, config.input_width))
    labels = [i % config.num_classes for i in range(batch)]
    return Tensor(x), labels


def warm_up_batch_norm(model: Module, x: Tensor, passes: int = 3) -> None:
    """Move running statistics toward the data, then switch to eval mode."""
    model.train()
    for _ in range(passes):
        model.forward(x)  # type: ignore
    model.eval()


def tiny_options(**kw) -> TrainOptions:
    """Synthetic-data options small enough to run every experiment in seconds."""
    params = dict(
        synthetic=True,
        synthetic_per_class=6,
        synthetic_width=32,
        epochs=2,
        batch_size=8,
        epoch_list=(1, 2),
        noise_seeds=2,
        lr_epochs=20,
        rf_trees=5,
        rf_max_depth=4,
    )
    params.update(kw)
    return DEFAULT_OPTIONS.overlay(**params).validate()
