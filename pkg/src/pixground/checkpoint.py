"""Portable binary checkpoints.

Layout (all integers little-endian, fixed width)::

    magic        8 bytes   b"PIXGCKPT"
    version      u32
    config_hash  32 bytes  raw sha256 of the canonical model-config JSON
    n_records    u32
    record*      kind u8 | name_len u16 | name utf-8 | ndim u8 | dims u32*ndim
                 | payload_len u64 | payload | crc32 u32

``kind`` is 0 for a parameter, 1/2 for the optimizer's first/second moments and
3 for a UTF-8 JSON blob (model config, optimizer counters). Tensor payloads are
float32 little-endian in C order. The CRC covers every byte of the record before it.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .model import GroundingModel, ModelConfig
from .optim import AdamW

MAGIC = b"PIXGCKPT"
VERSION = 1

KIND_PARAM, KIND_M, KIND_V, KIND_JSON = 0, 1, 2, 3
_KINDS = {KIND_PARAM: "param", KIND_M: "adam_m", KIND_V: "adam_v", KIND_JSON: "json"}


class CheckpointError(RuntimeError):
    pass


class IntegrityError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def config_hash(cfg: ModelConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Checkpoint:
    config_hash: str
    config: dict | None
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_meta: dict | None = None

    @property
    def has_optimizer(self) -> bool:
        return self.optimizer_meta is not None


def _record(kind: int, name: str, payload: bytes, shape=()) -> bytes:
    name_b = name.encode()
    head = struct.pack("<BH", kind, len(name_b)) + name_b
    head += struct.pack("<B", len(shape)) + b"".join(struct.pack("<I", d) for d in shape)
    body = head + struct.pack("<Q", len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def _tensor_record(kind: int, name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    return _record(kind, name, data.tobytes(), data.shape)


def _json_record(name: str, obj) -> bytes:
    return _record(KIND_JSON, name, json.dumps(obj, sort_keys=True).encode())


def encode(model: GroundingModel, optimizer: AdamW | None = None) -> bytes:
    records = [_json_record("config", model.config.to_dict())]
    for name, p in model.named_parameters():
        records.append(_tensor_record(KIND_PARAM, name, p.data))
    if optimizer is not None:
        st = optimizer.state
        records.append(_json_record("optimizer", {
            "step": st.step, "steps": st.steps, "lr_scale": optimizer.lr_scale}))
        for name in sorted(st.m):
            records.append(_tensor_record(KIND_M, name, st.m[name]))
            records.append(_tensor_record(KIND_V, name, st.v[name]))
    header = MAGIC + struct.pack("<I", VERSION) + bytes.fromhex(config_hash(model.config))
    return header + struct.pack("<I", len(records)) + b"".join(records)


def save_checkpoint(model: GroundingModel, path: str, optimizer: AdamW | None = None) -> None:
    """Write atomically: a temp file in the target directory is renamed into place."""
    blob = encode(model, optimizer)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise EOFError
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    try:
        magic = r.take(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = r.unpack("<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
        digest = r.take(32).hex()
        (count,) = r.unpack("<I")
    except EOFError:
        raise IntegrityError("truncated header") from None

    ck = Checkpoint(config_hash=digest, config=None, params={})
    for i in range(count):
        start = r.pos
        name = None
        try:
            kind, name_len = r.unpack("<BH")
            name = r.take(name_len).decode()
            (ndim,) = r.unpack("<B")
            shape = tuple(r.unpack("<I")[0] for _ in range(ndim))
            (size,) = r.unpack("<Q")
            payload = r.take(size)
            (crc,) = r.unpack("<I")
        except (EOFError, UnicodeDecodeError):
            label = f"record {i}" + (f" ({name!r})" if name else "")
            raise IntegrityError(f"{label}: truncated or malformed") from None
        if zlib.crc32(blob[start:r.pos - 4]) != crc:
            raise IntegrityError(f"record {i} ({name!r}): checksum mismatch")
        if kind == KIND_JSON:
            obj = json.loads(payload.decode())
            if name == "config":
                ck.config = obj
            elif name == "optimizer":
                ck.optimizer_meta = obj
            continue
        if kind not in _KINDS:
            raise IntegrityError(f"record {i} ({name!r}): unknown kind {kind}")
        if size != 4 * int(np.prod(shape, dtype=np.int64)):
            raise IntegrityError(f"record {i} ({name!r}): payload size does not match shape")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        {KIND_PARAM: ck.params, KIND_M: ck.adam_m, KIND_V: ck.adam_v}[kind][name] = arr
    if r.pos != len(blob):
        raise IntegrityError(f"{len(blob) - r.pos} trailing bytes after record {count - 1}")
    return ck


def read_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return decode(blob)


def load_checkpoint(path: str, model: GroundingModel | None = None,
                    optimizer: AdamW | None = None,
                    allow_config_mismatch: bool = False) -> GroundingModel:
    """Restore parameters (and optionally optimizer state) from ``path``.

    Without ``model`` a fresh one is built from the stored config. A model whose
    config hashes differently is refused unless ``allow_config_mismatch`` is set.
    """
    ck = read_checkpoint(path)
    if model is None:
        if ck.config is None:
            raise CheckpointError(f"{path}: no stored config; pass a model")
        model = GroundingModel(ModelConfig(**ck.config))
    theirs, ours = ck.config_hash, config_hash(model.config)
    if theirs != ours and not allow_config_mismatch:
        raise ConfigMismatchError(
            f"{path}: config hash {theirs[:12]} does not match model config {ours[:12]}")
    model.load_state_dict(ck.params, strict=not allow_config_mismatch)
    if optimizer is not None:
        if not ck.has_optimizer:
            raise CheckpointError(f"{path}: no optimizer state stored")
        st = optimizer.state
        st.step = int(ck.optimizer_meta["step"])
        st.steps = {k: int(v) for k, v in ck.optimizer_meta["steps"].items()}
        st.m = {k: v.astype(model.dtype) for k, v in ck.adam_m.items()}
        st.v = {k: v.astype(model.dtype) for k, v in ck.adam_v.items()}
        optimizer.lr_scale = float(ck.optimizer_meta["lr_scale"])
    return model
