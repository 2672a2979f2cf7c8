"""Bit-exact checkpoint I/O and line-delimited metrics logging.

Checkpoint byte layout, all integers little-endian::

    offset  size  field
    0       4     magic b"SQFG"
    4       2     uint16 format version (currently 1)
    6       4     uint32 header length H
    10      H     UTF-8 JSON header
    10+H    ...   tensor payload, float32 little-endian
    last    4     uint32 CRC32 over bytes [6 : -4]

The JSON header carries the model config, the phase history, the ordered
(name, shape) tensor directory, and optimizer scalars when optimizer state
is included.  The payload stores parameters in the model's canonical order,
followed by the optimizer's first- and second-moment tensors in the same
order when present.  Identical inputs always serialize to identical bytes:
the header is emitted with sorted keys and no incidental whitespace, and
tensor order is fixed by the model.
"""

import dataclasses
import json
import os
import tempfile
import zlib

import numpy as np

from .errors import (CheckpointError, CheckpointIntegrityError,
                     CheckpointMagicError, CheckpointShapeError,
                     CheckpointVersionError)
from .model import ModelConfig, TransformerModel, init_model
from .trainer import OptimizerState

MAGIC = b"SQFG"
VERSION = 1

_PREFIX = len(MAGIC) + 2 + 4  # magic + version + header length
_MIN_SIZE = _PREFIX + 2 + 4  # smallest header "{}" + trailing crc


def _encode(model: TransformerModel, optimizer: OptimizerState | None) -> bytes:
    names = model.parameter_names()
    header = {
        "config": dataclasses.asdict(model.config),
        "phases_done": list(model.phases_done),
        "tensors": [[n, list(model.params[n].values.shape)] for n in names],
        "optimizer": None,
    }
    chunks = [model.params[n].values.astype("<f4", copy=False).tobytes()
              for n in names]
    if optimizer is not None:
        header["optimizer"] = {
            "lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
            "eps": optimizer.eps, "weight_decay": optimizer.weight_decay,
            "t": optimizer.t,
        }
        for moment in (optimizer.m, optimizer.v):
            missing = [n for n in names if n not in moment]
            if missing:
                raise CheckpointError(
                    f"optimizer state lacks moments for {missing[:3]}"
                )
            chunks += [moment[n].astype("<f4", copy=False).tobytes()
                       for n in names]
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = len(head).to_bytes(4, "little") + head + b"".join(chunks)
    crc = zlib.crc32(body).to_bytes(4, "little")
    return MAGIC + VERSION.to_bytes(2, "little") + body + crc


def save_checkpoint(model: TransformerModel, optimizer: OptimizerState | None,
                    path) -> None:
    """Write atomically: a crash mid-save never leaves a readable file."""
    blob = _encode(model, optimizer)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _read_tensor(payload: bytes, offset: int, shape) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    end = offset + 4 * count
    if end > len(payload):
        raise CheckpointShapeError("payload shorter than the tensor directory")
    flat = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
    return flat.reshape(shape).copy(), end


def load_checkpoint(path) -> tuple[TransformerModel, OptimizerState | None]:
    """Validate magic, version, checksum, and config before touching tensors."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _MIN_SIZE:
        raise CheckpointIntegrityError(f"{path}: truncated checkpoint")
    if blob[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint file")
    version = int.from_bytes(blob[4:6], "little")
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} unsupported (expected {VERSION})"
        )
    crc = int.from_bytes(blob[-4:], "little")
    if zlib.crc32(blob[6:-4]) != crc:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch")
    head_len = int.from_bytes(blob[6:10], "little")
    head_end = 10 + head_len
    if head_end > len(blob) - 4:
        raise CheckpointIntegrityError(f"{path}: header overruns file")
    try:
        header = json.loads(blob[10:head_end])
    except ValueError as exc:
        raise CheckpointIntegrityError(f"{path}: malformed header: {exc}") from exc

    config = ModelConfig(**header["config"])
    model = init_model(config)
    names = model.parameter_names()
    directory = [(n, tuple(s)) for n, s in header["tensors"]]
    expected = [(n, model.params[n].values.shape) for n in names]
    if directory != expected:
        raise CheckpointShapeError(
            f"{path}: tensor directory does not match the stored config"
        )

    payload = blob[head_end:-4]
    offset = 0
    for name, shape in directory:
        values, offset = _read_tensor(payload, offset, shape)
        model.params[name].values = values
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = OptimizerState(**header["optimizer"])
        for moment in (optimizer.m, optimizer.v):
            for name, shape in directory:
                moment[name], offset = _read_tensor(payload, offset, shape)
    if offset != len(payload):
        raise CheckpointShapeError(f"{path}: {len(payload) - offset} trailing bytes")
    model.phases_done = list(header["phases_done"])
    return model, optimizer


def append_metrics(records, path) -> None:
    """Append one JSON record per line; accepts a dict or an iterable of them."""
    if isinstance(records, dict):
        records = [records]
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
