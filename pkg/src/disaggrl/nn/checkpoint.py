"""Checkpoint files.

Layout: ``b"DSNN"``, version u8, config JSON (u32 length + utf-8), then every
parameter as a TensorWire record (see :mod:`disaggrl.proto`) in
``PolicyNet.params`` order, which is: layers in construction order (conv
stack, embed, recurrent cells, MLP, mean, value, aux), each layer's own
parameters in definition order, and ``log_std`` last.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .. import proto
from .policy import NetConfig, PolicyNet

MAGIC = b"DSNN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(net: PolicyNet, path, extra: dict | None = None) -> None:
    meta = {"net": net.cfg.to_dict(), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", VERSION, len(blob)), blob]
    parts += [proto.encode_tensor(arr) for arr in net.params.values()]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path, expect: NetConfig | None = None) -> tuple[PolicyNet, dict]:
    """Load a network; rejects files whose config differs from ``expect``."""
    data = memoryview(Path(path).read_bytes())
    if bytes(data[:4]) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<BI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta = json.loads(bytes(data[9 : 9 + n]).decode("utf-8"))
    cfg = NetConfig.from_dict(meta["net"])
    if expect is not None and cfg.to_dict() != expect.to_dict():
        raise CheckpointError(f"{path}: config mismatch")
    net = PolicyNet(cfg)
    reader = proto._Reader(data[9 + n :])
    for key, arr in net.params.items():
        try:
            t = reader.tensor()
        except proto.ProtocolError as exc:
            raise CheckpointError(f"{path}: truncated at {key}") from exc
        if t.shape != arr.shape:
            raise CheckpointError(f"{path}: {key} has shape {t.shape}, expected {arr.shape}")
        arr[...] = t
    if reader.pos != len(reader.buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return net, meta.get("extra", {})
