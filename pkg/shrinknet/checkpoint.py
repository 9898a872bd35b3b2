"""
Self-describing binary checkpoints.

Layout (all integers little-endian)::

    b"SHRK"                       magic
    u32  format version           currently 1
    u32  header length in bytes
    header                        UTF-8 "key=value" lines: model kind,
                                  payload dtype, tensor count, then every
                                  ModelConfig field
    repeated per tensor, in state_dict order:
      u16  name length, name (UTF-8)
      u8   rank, then rank x u32 extents
      row-major values, "<f8" or "<f4" as declared by the header

Nothing may follow the last tensor.
"""

import struct
from dataclasses import fields
from typing import Dict, List, Tuple

import numpy as np

from shrinknet.models import ModelConfig, ModelKind, ShrinkageNetwork, build_model
from shrinknet.options import Precision, ShrinkageMode
from shrinknet.util import (
    CheckpointError,
    CheckpointVersionError,
    ConfigurationError,
    CorruptCheckpointError,
    debug,
)

MAGIC = b"SHRK"
FORMAT_VERSION = 1
PAYLOAD_DTYPES = {"f8": "<f8", "f4": "<f4"}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, (ShrinkageMode, Precision)):
        return value.value
    return str(value)


def config_to_header(config: ModelConfig) -> List[Tuple[str, str]]:
    return [(f.name, _format_value(getattr(config, f.name))) for f in fields(ModelConfig)]


def config_from_header(entries: Dict[str, str]) -> ModelConfig:
    kw = {}
    for f in fields(ModelConfig):
        if f.name not in entries:
            raise CorruptCheckpointError(f'header lacks the "{f.name}" entry')
        text = entries[f.name]
        try:
            if f.name in ("stage_channels", "blocks_per_stage"):
                kw[f.name] = tuple(int(v) for v in text.split(",") if v)
            elif f.name == "fc_hidden":
                kw[f.name] = None if text == "none" else int(text)
            elif f.name == "mode":
                kw[f.name] = ShrinkageMode(text)
            elif f.name == "precision":
                kw[f.name] = Precision(text)
            else:
                kw[f.name] = int(text)
        except ValueError:
            raise CorruptCheckpointError(f'header entry "{f.name}" has bad value {text!r}')
    return ModelConfig(**kw)


def encode_checkpoint(model: ShrinkageNetwork, payload: str = "f8") -> bytes:
    if payload not in PAYLOAD_DTYPES:
        raise ConfigurationError("payload", f"must be one of {sorted(PAYLOAD_DTYPES)}")
    state = model.state_dict()
    header_entries = [
        ("kind", model.kind.value),
        ("dtype", payload),
        ("tensors", str(len(state))),
    ] + config_to_header(model.config)
    header = "".join(f"{k}={v}\n" for k, v in header_entries).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    dtype = PAYLOAD_DTYPES[payload]
    for name, array in state.items():
        encoded_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded_name)))
        parts.append(encoded_name)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(parts)


def save_checkpoint(model: ShrinkageNetwork, path: str, payload: str = "f8") -> None:
    data = encode_checkpoint(model, payload)
    with open(path, "wb") as fh:
        fh.write(data)
    debug("wrote", len(data), "bytes to", path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise CorruptCheckpointError(f"file is truncated while reading {what}")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes) -> ShrinkageNetwork:
    reader = _Reader(data)
    if reader.take(4, "the magic number") != MAGIC:
        raise CorruptCheckpointError("not a shrinknet checkpoint (bad magic number)")
    version, header_len = reader.unpack("<II", "the format version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    try:
        header_text = reader.take(header_len, "the header").decode("utf-8")
        entries = dict(line.split("=", 1) for line in header_text.splitlines())
        kind = ModelKind(entries["kind"])
        payload = PAYLOAD_DTYPES[entries["dtype"]]
        tensor_count = int(entries["tensors"])
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise CorruptCheckpointError(f"unreadable header ({exc})")
    try:
        model = build_model(config_from_header(entries), kind)
    except ConfigurationError as exc:
        raise CorruptCheckpointError(f"header describes an invalid model: {exc}")
    itemsize = np.dtype(payload).itemsize
    state: Dict[str, np.ndarray] = {}
    for i in range(tensor_count):
        (name_len,) = reader.unpack("<H", f"tensor {i}")
        try:
            name = reader.take(name_len, f"tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpointError(f"tensor {i} has an undecodable name")
        (rank,) = reader.unpack("<B", name)
        shape = reader.unpack(f"<{rank}I", name)
        raw = reader.take(int(np.prod(shape, dtype=np.int64)) * itemsize, name)
        state[name] = np.frombuffer(raw, dtype=payload).reshape(shape)
    if reader.offset != len(data):
        raise CorruptCheckpointError(f"{len(data) - reader.offset} unexpected trailing bytes")
    model.load_state_dict(state)
    return model


def load_checkpoint(path: str) -> ShrinkageNetwork:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}")
    return decode_checkpoint(data)

