"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ASRG"                     magic
    u32                         format version
    u64 n, n bytes              architecture/training config, UTF-8 ``key = value`` text
    3 sections, in order: model tensors, optimizer state, training/RNG state
        u64                     record count
        per record:
            u32 n, n bytes      tensor name, UTF-8
            u32                 rank
            u64 * rank          dims
            f64 * prod(dims)    payload, row-major
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ASRG"
VERSION = 1
SECTIONS = ("model", "optimizer", "state")


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config_text: str
    model: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    optimizer: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    state: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = VERSION

    def section(self, name: str) -> "OrderedDict[str, np.ndarray]":
        return getattr(self, name)

    def with_prefix(self, section: str, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """Entries of ``section`` under ``prefix`` with the prefix stripped."""
        return OrderedDict((k[len(prefix):], v) for k, v in self.section(section).items() if k.startswith(prefix))

    @property
    def global_step(self) -> int:
        return int(self.state["global_step"])

    @property
    def phase(self) -> str:
        return "gan" if "gan_start" in self.state else "resnet"


def _write_records(buf: bytearray, records: dict) -> None:
    buf += struct.pack("<Q", len(records))
    for name, arr in records.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps rank 0
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()


def dumps(ckpt: Checkpoint) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", ckpt.version)
    cfg = ckpt.config_text.encode("utf-8")
    buf += struct.pack("<Q", len(cfg)) + cfg
    for name in SECTIONS:
        _write_records(buf, ckpt.section(name))
    return bytes(buf)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = r.unpack("<Q")
    ckpt = Checkpoint(r.take(n).decode("utf-8"), version=version)
    for section in SECTIONS:
        (count,) = r.unpack("<Q")
        records = ckpt.section(section)
        for _ in range(count):
            (ln,) = r.unpack("<I")
            name = r.take(ln).decode("utf-8")
            (rank,) = r.unpack("<I")
            dims = r.unpack(f"<{rank}Q") if rank else ()
            size = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(r.take(8 * size), dtype="<f8")
            records[name] = payload.astype(np.float64).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)


def load_into(module, records: dict, what: str = "model") -> None:
    """Strictly load ``records`` into ``module``; mismatches name the tensor."""
    try:
        module.load_state_dict(records)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{what} does not match checkpoint: {exc}") from exc
