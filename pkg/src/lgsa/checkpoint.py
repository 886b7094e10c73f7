"""Binary checkpoint format.

Layout (little-endian throughout)::

    magic     8 bytes  b"LGSACKPT"
    version   u32
    hlen      u32      length of the UTF-8 JSON header that follows
    header    hlen bytes (config snapshot, step counter, data cursor)
    count     u32      number of tensor entries
    entries   count x { u32 name length, name bytes, u32 ndim, ndim x u64 extents, float64 data }

Entry names are ``param/<name>``, ``adam.m/<name>`` and ``adam.v/<name>``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig

MAGIC = b"LGSACKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    params: "OrderedDict[str, np.ndarray]"
    adam_m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    adam_v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0
    # data-order cursor: (epoch, batch index within epoch) of the next batch
    epoch: int = 0
    batch_index: int = 0
    # running sums of the epoch in progress, so a resumed run logs identically
    epoch_sums: dict = field(default_factory=dict)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    arr = np.asarray(arr, dtype="<f8")  # tobytes() writes C order; keeps 0-d shapes
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "batch_index": ckpt.batch_index,
        "epoch_sums": ckpt.epoch_sums,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    entries = [("param/" + k, v) for k, v in ckpt.params.items()]
    entries += [("adam.m/" + k, v) for k, v in ckpt.adam_m.items()]
    entries += [("adam.v/" + k, v) for k, v in ckpt.adam_v.items()]
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hb)), hb, struct.pack("<I", len(entries))]
    parts += [_pack_tensor(n, a) for n, a in entries]
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    try:
        return _parse(buf)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt or truncated checkpoint: {exc}") from exc


def _parse(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(buf[pos : pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    groups = {"param": OrderedDict(), "adam.m": OrderedDict(), "adam.v": OrderedDict()}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"entry {name!r} runs past the end of the file")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise CheckpointError(f"unknown entry {name!r}")
        groups[kind][key] = arr
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes after {count} entries")
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        params=groups["param"],
        adam_m=groups["adam.m"],
        adam_v=groups["adam.v"],
        step=header["step"],
        epoch=header["epoch"],
        batch_index=header["batch_index"],
        epoch_sums=header.get("epoch_sums", {}),
    )


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
