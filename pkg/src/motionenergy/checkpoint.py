"""Versioned binary checkpoints.

Layout::

    b"MENC"  | u32 version | u32 header length | JSON header | array payload

The JSON header holds the network config, the training config and trainer
state (including the sampler's rng state) plus a manifest of the arrays.
Arrays are little-endian float64, stored back to back in manifest order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import MotionNet, NetworkConfig

MAGIC = b"MENC"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: dict
    train_config: dict | None = None
    state: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)  # everything beyond the parameters (optimiser moments)

    def network(self):
        return MotionNet(self.config, {k: v.copy() for k, v in self.params.items()})


def _encode(header, arrays):
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = dict(header, arrays=manifest)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + b"".join(chunks)


def _decode(data):
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    base = 12 + hlen
    arrays = {}
    for entry in header.pop("arrays"):
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + 8 * n > len(data):
            raise CheckpointError(f"array {entry['name']} truncated")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=start).reshape(entry["shape"]).copy()
    return header, arrays


def save(path, net, train_config=None, state=None, extra_arrays=None):
    """Write ``net`` (and optional trainer state) atomically to ``path``."""
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    for k, v in (extra_arrays or {}).items():
        arrays[k] = v
    header = {"config": net.config.to_dict(), "train_config": train_config, "state": state or {}}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode(header, arrays))
    os.replace(tmp, path)


def load(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header, arrays = _decode(data)
    config = NetworkConfig.from_dict(header["config"])
    params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    rest = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    expected = MotionNet(config).zero_params()
    for k, v in expected.items():
        if k not in params or params[k].shape != v.shape:
            raise CheckpointError(f"parameter {k} missing or misshapen")
    return Checkpoint(config, params, header.get("train_config"), header.get("state", {}), rest)


def load_network(path):
    return load(path).network()
