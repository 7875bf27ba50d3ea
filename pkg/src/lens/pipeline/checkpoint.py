"""Binary checkpoint format.

Layout (little endian)::

    b"LENS" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u32 rank | rank x u64 dim | f32 payload )
    32-byte config hash | u32 len | rng-state json | u64 step | u32 len | stage tag
    u32 crc32 of everything above
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numerics import OptimizerState

MAGIC = b"LENS"
VERSION = 1
STAGES = ("bootstrap", "align", "rl")


class CheckpointError(ValueError):
    pass


class ConfigMismatch(CheckpointError):
    pass


class StageOrderError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    stage: str
    tensors: dict[str, np.ndarray]
    config_hash: bytes
    rng_state: dict = field(default_factory=dict)
    step: int = 0
    version: int = VERSION

    def require_stage(self, *allowed: str) -> None:
        if self.stage not in allowed:
            raise StageOrderError(f"checkpoint stage {self.stage!r}; this command needs {' or '.join(allowed)}")


def encode_checkpoint(ck: Checkpoint) -> bytes:
    if ck.stage not in STAGES:
        raise CheckpointError(f"unknown stage {ck.stage!r}")
    if len(ck.config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    out = [MAGIC, struct.pack("<II", ck.version, len(ck.tensors))]
    for name, arr in ck.tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    rng = json.dumps(ck.rng_state, sort_keys=True, separators=(",", ":")).encode()
    tag = ck.stage.encode()
    out.append(ck.config_hash)
    out.append(struct.pack("<I", len(rng)) + rng)
    out.append(struct.pack("<Q", ck.step))
    out.append(struct.pack("<I", len(tag)) + tag)
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch (corrupt or truncated checkpoint)")
    r = _Reader(body)
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = r.unpack("<I")
            name = r.take(n).decode("utf-8")
            (rank,) = r.unpack("<I")
            dims = r.unpack(f"<{rank}Q") if rank else ()
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
            if name in tensors:
                raise CheckpointError(f"duplicate entry {name!r}")
            tensors[name] = arr
        config_hash = r.take(32)
        (n,) = r.unpack("<I")
        rng_state = json.loads(r.take(n).decode())
        (step,) = r.unpack("<Q")
        (n,) = r.unpack("<I")
        stage = r.take(n).decode()
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after footer")
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage {stage!r}")
    return Checkpoint(stage, tensors, config_hash, rng_state, step, version)


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path, config_hash: bytes | None = None, override: bool = False) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"no checkpoint at {p}")
    ck = decode_checkpoint(p.read_bytes())
    if config_hash is not None and ck.config_hash != config_hash and not override:
        raise ConfigMismatch(f"{p} was written under a different config (pass the override flag to load anyway)")
    return ck


# -- optimizer state as tensor entries ----------------------------------------------


def optimizer_entries(group: str, state: OptimizerState) -> dict[str, np.ndarray]:
    out = {f"optim.{group}.t": np.array(state.step, dtype=np.float32)}
    for k in state.m:
        out[f"optim.{group}.m.{k}"] = state.m[k]
        out[f"optim.{group}.v.{k}"] = state.v[k]
    return out


def optimizer_from_entries(group: str, tensors: dict[str, np.ndarray]) -> OptimizerState:
    key = f"optim.{group}.t"
    if key not in tensors:
        raise CheckpointError(f"no optimizer state for {group!r}")
    m, v = {}, {}
    pm, pv = f"optim.{group}.m.", f"optim.{group}.v."
    for name, arr in tensors.items():
        if name.startswith(pm):
            m[name[len(pm) :]] = arr.copy()
        elif name.startswith(pv):
            v[name[len(pv) :]] = arr.copy()
    return OptimizerState(m=m, v=v, step=int(tensors[key]))
