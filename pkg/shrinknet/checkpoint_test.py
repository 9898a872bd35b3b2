import struct

import numpy as np
import pytest

from shrinknet.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from shrinknet.models import ModelKind, build_cnn_baseline, build_drsn
from shrinknet.options import ShrinkageMode
from shrinknet.test_util import toy_batch, toy_config, warm_up_batch_norm
from shrinknet.util import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    CorruptCheckpointError,
)


def _trained_looking_model(mode=ShrinkageMode.cw):
    config = toy_config(mode)
    model = build_drsn(config)
    x, _ = toy_batch(config)
    warm_up_batch_norm(model, x)
    return model, x


@pytest.mark.parametrize("mode", list(ShrinkageMode))
def test_round_trip_reproduces_logits_bitwise(tmp_path, mode) -> None:
    model, x = _trained_looking_model(mode)
    path = str(tmp_path / "model.shrk")
    save_checkpoint(model, path)
    loaded = load_checkpoint(path).eval()
    assert loaded.config == model.config
    assert loaded.forward(x).values.tobytes() == model.forward(x).values.tobytes()
    for name, value in model.state_dict().items():
        assert loaded.state_dict()[name].tobytes() == value.tobytes()


def test_round_trip_keeps_model_kind() -> None:
    cnn = build_cnn_baseline(toy_config())
    assert decode_checkpoint(encode_checkpoint(cnn)).kind is ModelKind.cnn


def test_encoding_is_deterministic_and_starts_with_magic() -> None:
    model, _ = _trained_looking_model()
    data = encode_checkpoint(model)
    assert data == encode_checkpoint(model)
    assert data[:4] == b"SHRK"
    assert struct.unpack("<I", data[4:8]) == (1,)
    assert b"dtype=f8\n" in data


def test_single_precision_payload() -> None:
    model, x = _trained_looking_model()
    data = encode_checkpoint(model, payload="f4")
    assert b"dtype=f4\n" in data
    assert len(data) < len(encode_checkpoint(model))
    loaded = decode_checkpoint(data).eval()
    np.testing.assert_allclose(loaded.forward(x).values, model.forward(x).values, rtol=1e-5, atol=1e-5)


def test_truncated_file_is_corrupt() -> None:
    data = encode_checkpoint(build_drsn(toy_config()))
    for cut in (2, 10, len(data) // 2, len(data) - 1):
        with pytest.raises(CorruptCheckpointError):
            decode_checkpoint(data[:cut])


def test_trailing_bytes_are_corrupt() -> None:
    data = encode_checkpoint(build_drsn(toy_config()))
    with pytest.raises(CorruptCheckpointError, match="trailing"):
        decode_checkpoint(data + b"\0")


def test_bad_magic_is_corrupt() -> None:
    data = encode_checkpoint(build_drsn(toy_config()))
    with pytest.raises(CorruptCheckpointError, match="magic"):
        decode_checkpoint(b"PK\x03\x04" + data[4:])


def test_version_mismatch() -> None:
    data = encode_checkpoint(build_drsn(toy_config()))
    data = data[:4] + struct.pack("<I", 2) + data[8:]
    with pytest.raises(CheckpointVersionError, match="version 2"):
        decode_checkpoint(data)


def test_config_tensor_conflict_names_the_tensor() -> None:
    data = encode_checkpoint(build_drsn(toy_config()))
    assert b"stem_channels=3\n" in data
    data = data.replace(b"stem_channels=3\n", b"stem_channels=5\n", 1)
    with pytest.raises(CheckpointShapeError, match="stem.weight"):
        decode_checkpoint(data)


def test_missing_file(tmp_path) -> None:
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(str(tmp_path / "absent.shrk"))
