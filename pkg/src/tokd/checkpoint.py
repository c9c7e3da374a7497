"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic        8 bytes   b"TOKD0001"
    config_len   u32
    config       config_len bytes, UTF-8 "key=value\\n" lines in sorted key order
    then three record groups, in order: parameters, EMA shadows, optimizer state
        count    u32
        count records of:
            name_len  u16
            name      name_len bytes UTF-8
            dtype     u8   (1 = float32, 2 = float64)
            ndim      u8
            shape     ndim x u32
            data      prod(shape) values, little-endian, row-major

Config keys: ``model.<field>`` for every ModelConfig field, ``step``, ``seed``,
``rng_state`` (JSON, may be empty) and any ``meta.<key>`` strings. EMA records
reuse the parameter names; optimizer records are named ``m.<param>`` and
``v.<param>``. Writing is deterministic, so load-then-save reproduces the file
byte for byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetIOError, FormatError
from .model import ModelConfig

MAGIC = b"TOKD0001"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


@dataclass
class Checkpoint:
    params: dict
    ema: dict
    config: ModelConfig
    step: int = 0
    seed: int = 0
    rng_state: dict | None = None
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.params.items():
            if name not in self.ema:
                raise FormatError(f"parameter {name} has no EMA shadow")
            if np.shape(self.ema[name]) != np.shape(arr):
                raise FormatError(f"EMA shadow of {name} has shape {np.shape(self.ema[name])}, expected {np.shape(arr)}")


def _config_text(ck: Checkpoint) -> str:
    entries = {}
    for k, v in ck.config.to_dict().items():
        entries[f"model.{k}"] = json.dumps(v)
    entries["step"] = str(int(ck.step))
    entries["seed"] = str(int(ck.seed))
    entries["rng_state"] = json.dumps(ck.rng_state, sort_keys=True) if ck.rng_state else ""
    for k, v in ck.meta.items():
        entries[f"meta.{k}"] = str(v)
    for k, v in entries.items():
        if "\n" in k or "\n" in v or "=" in k:
            raise FormatError(f"config entry {k!r} cannot be serialized")
    return "".join(f"{k}={entries[k]}\n" for k in sorted(entries))


def _write_group(buf: list, arrays: dict):
    buf.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"array {name} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.append(struct.pack("<H", len(raw)) + raw)
        buf.append(struct.pack("<BB", code, arr.ndim))
        buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def to_bytes(ck: Checkpoint) -> bytes:
    buf = [MAGIC]
    text = _config_text(ck).encode("utf-8")
    buf.append(struct.pack("<I", len(text)) + text)
    _write_group(buf, ck.params)
    _write_group(buf, {k: ck.ema[k] for k in ck.params})
    opt = {}
    for k in ck.params:
        if k in ck.opt_m:
            opt[f"m.{k}"] = ck.opt_m[k]
            opt[f"v.{k}"] = ck.opt_v[k]
    _write_group(buf, opt)
    return b"".join(buf)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_group(r: _Reader) -> dict:
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{r.source}: record {name} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return out


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    (clen,) = r.unpack("<I")
    entries = {}
    for line in r.take(clen).decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        entries[k] = v
    model = {k[len("model."):]: json.loads(v) for k, v in entries.items() if k.startswith("model.")}
    params = _read_group(r)
    ema = _read_group(r)
    opt = _read_group(r)
    if r.pos != len(data):
        raise FormatError(f"{source}: {len(data) - r.pos} trailing bytes")
    return Checkpoint(
        params=params,
        ema=ema,
        config=ModelConfig.from_dict(model),
        step=int(entries.get("step", "0")),
        seed=int(entries.get("seed", "0")),
        rng_state=json.loads(entries["rng_state"]) if entries.get("rng_state") else None,
        opt_m={k[2:]: v for k, v in opt.items() if k.startswith("m.")},
        opt_v={k[2:]: v for k, v in opt.items() if k.startswith("v.")},
        meta={k[len("meta."):]: v for k, v in entries.items() if k.startswith("meta.")},
    )


def save(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return from_bytes(data, str(path))
