"""Binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic "PDWNCKPT"
    u32       format version
    u32 + n   architecture config text (UTF-8)
    u32 + n   training config text (UTF-8, may be empty)
    u64       optimizer step counter
    u32       parameter count, then per parameter:
                u16 + n name, u8 ndim, u32 * ndim shape, float32 values
    u8        1 if Adam moments follow, else 0
    [u64 Adam t, then for every parameter in the same order: m values, v values]
"""

from __future__ import annotations

import io
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .config import ArchConfig, ConfigError, parse_pairs
from .model import PDWN
from .tensor import Adam

MAGIC = b"PDWNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"checkpoint format version {found} is not supported (this build reads version {expected})")
        self.found, self.expected = found, expected


class TruncatedError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, keys: list[str], stored: ArchConfig, requested: ArchConfig):
        detail = ", ".join(f"{k}: checkpoint={getattr(stored, k)!r} requested={getattr(requested, k)!r}"
                           for k in keys)
        super().__init__(f"checkpoint config differs from the requested config ({detail})")
        self.keys = keys


@dataclass
class Checkpoint:
    config: ArchConfig
    params: "OrderedDict[str, np.ndarray]"
    step: int = 0
    train_text: str = ""
    adam_t: int | None = None
    adam_m: "OrderedDict[str, np.ndarray] | None" = None
    adam_v: "OrderedDict[str, np.ndarray] | None" = None

    @property
    def has_optimizer(self) -> bool:
        return self.adam_t is not None


def _text(buf: io.BytesIO, text: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _text(buf, ckpt.config.to_text())
    _text(buf, ckpt.train_text)
    buf.write(struct.pack("<Q", ckpt.step))
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(_f32(arr))
    if ckpt.has_optimizer:
        buf.write(struct.pack("<BQ", 1, ckpt.adam_t))
        for name in ckpt.params:
            buf.write(_f32(ckpt.adam_m[name]))
            buf.write(_f32(ckpt.adam_v[name]))
    else:
        buf.write(struct.pack("<B", 0))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file ends inside {what} (need {n} bytes at offset {self.pos}, "
                                 f"file has {len(self.data)})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str) -> str:
        (n,) = self.unpack("<I", what)
        return self.take(n, what).decode("utf-8")

    def floats(self, shape, what: str) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").reshape(shape).astype(np.float32)


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = data[:len(MAGIC)]
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {magic!r} != {MAGIC!r}")
    r.pos = len(MAGIC)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(version, VERSION)
    try:
        config = ArchConfig.from_text(r.text("architecture config"))
    except ConfigError as exc:
        raise CheckpointError(f"embedded config is invalid: {exc}") from None
    train_text = r.text("training config")
    (step,) = r.unpack("<Q", "step counter")
    (count,) = r.unpack("<I", "parameter count")
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        (n,) = r.unpack("<H", f"parameter {i} name")
        name = r.take(n, f"parameter {i} name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"parameter {name!r} rank")
        shape = r.unpack(f"<{ndim}I", f"parameter {name!r} shape")
        params[name] = r.floats(shape, f"parameter {name!r}")
    (has_adam,) = r.unpack("<B", "optimizer flag")
    ckpt = Checkpoint(config, params, step, train_text)
    if has_adam:
        (ckpt.adam_t,) = r.unpack("<Q", "optimizer step")
        ckpt.adam_m, ckpt.adam_v = OrderedDict(), OrderedDict()
        for name, arr in params.items():
            ckpt.adam_m[name] = r.floats(arr.shape, f"first moment of {name!r}")
            ckpt.adam_v[name] = r.floats(arr.shape, f"second moment of {name!r}")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} unexpected trailing bytes")
    return ckpt


def from_model(model: PDWN, optimizer: Adam | None = None, step: int = 0, train_text: str = "") -> Checkpoint:
    ckpt = Checkpoint(model.config, model.params.state(), step, train_text)
    if optimizer is not None:
        ckpt.adam_t = optimizer.t
        ckpt.adam_m = OrderedDict((k, v.copy()) for k, v in optimizer.m.items())
        ckpt.adam_v = OrderedDict((k, v.copy()) for k, v in optimizer.v.items())
    return ckpt


def save_checkpoint(path, model: PDWN, optimizer: Adam | None = None, step: int = 0, train_text: str = "") -> None:
    write(path, from_model(model, optimizer, step, train_text))


def write(path, ckpt: Checkpoint) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
    os.replace(tmp, path)


def read(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())


def check_config(stored: ArchConfig, requested: ArchConfig | None) -> None:
    if requested is None:
        return
    keys = stored.diff(requested)
    if keys:
        raise ConfigMismatchError(keys, stored, requested)


def restore(ckpt: Checkpoint, config: ArchConfig | None = None, lr: float = 2e-4,
            betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> tuple[PDWN, Adam | None]:
    """Build a model from a checkpoint (and its optimizer when moments were saved)."""
    check_config(ckpt.config, config)
    model = PDWN(ckpt.config)
    names = set(model.params.names())
    unknown = [n for n in ckpt.params if n not in names]
    if unknown:
        raise UnknownParameterError(f"checkpoint holds unknown parameter(s): {', '.join(unknown)}")
    missing = [n for n in model.params.names() if n not in ckpt.params]
    if missing:
        raise MissingParameterError(f"checkpoint lacks parameter(s): {', '.join(missing)}")
    model.params.load_state(ckpt.params)
    optimizer = None
    if ckpt.has_optimizer:
        if ckpt.train_text:
            pairs = parse_pairs(ckpt.train_text)
            lr = float(pairs.get("lr", lr))
            betas = (float(pairs.get("beta1", betas[0])), float(pairs.get("beta2", betas[1])))
            eps = float(pairs.get("eps", eps))
        optimizer = Adam(model.params, lr, betas[0], betas[1], eps)
        optimizer.load_state(ckpt.adam_t, ckpt.adam_m, ckpt.adam_v)
    return model, optimizer


def load_checkpoint(path, config: ArchConfig | None = None) -> tuple[PDWN, Adam | None, Checkpoint]:
    ckpt = read(path)
    model, optimizer = restore(ckpt, config)
    return model, optimizer, ckpt
