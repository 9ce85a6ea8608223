"""Checkpoint files.

Layout (little-endian)::

    magic    8 bytes  b"LGDCKPT\\0"
    version  u32
    hlen     u64      length of the JSON header
    header   hlen bytes of UTF-8 JSON
    payload  raw tensor bytes, concatenated in header order

The header carries the network spec, the experiment config snapshot, epoch,
completed stage, the stage the optimiser state belongs to, seed and a tensor
index of ``{group, name, dtype, shape, offset, nbytes}``. Groups are
``params``, ``buffers`` (batch-norm running statistics), ``sketch`` (hash and
sign tables) and ``velocity`` (optimiser state). Unknown versions are rejected before anything is loaded.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .backbone import Network, NetworkSpec
from .sketch import SketchConfig
from .training import TrainState

MAGIC = b"LGDCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save(path, net, config=None, state=None, epoch=0, stage=None):
    """Write ``net`` (and optimiser ``state`` of the given training ``stage``) to ``path``."""
    groups = {
        "params": net.params,
        "buffers": net.buffers,
        "sketch": {k: np.asarray(v, dtype=np.int64) for k, v in net.sketch.tables().items()},
        "velocity": state.velocity if state is not None else {},
    }
    index, chunks, offset = [], [], 0
    for group, tensors in groups.items():
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            index.append({"group": group, "name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "spec": net.spec.to_dict(),
        "seed": net.seed,
        "stage_done": net.stage_done,
        "stage": stage,
        "epoch": int(epoch if state is None else state.epoch),
        "sketch": {"input_dim": net.sketch.input_dim, "sketch_dim": net.sketch.sketch_dim,
                   "seed": net.sketch.seed},
        "config": config,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        f.write(hbytes)
        for c in chunks:
            f.write(c)


def read_header(path):
    with open(path, "rb") as f:
        prefix = f.read(_PREFIX.size)
        if len(prefix) != _PREFIX.size:
            raise CheckpointError(f"{path}: truncated checkpoint")
        magic, version, hlen = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version} (this build reads {VERSION})")
        header = json.loads(f.read(hlen))
        return header, f.read()


def load(path):
    """Return ``(network, train_state, header)``."""
    header, payload = read_header(path)
    groups = {"params": {}, "buffers": {}, "sketch": {}, "velocity": {}}
    for t in header["tensors"]:
        if t["group"] not in groups:
            raise CheckpointError(f"{path}: unknown tensor group {t['group']!r}")
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        dt = np.dtype(t["dtype"])
        arr = np.frombuffer(raw, dtype=dt).reshape(t["shape"]).astype(dt.newbyteorder("="))
        groups[t["group"]][t["name"]] = arr
    spec = NetworkSpec(**header["spec"])
    sk = header["sketch"]
    tables = groups["sketch"]
    sketch = SketchConfig(sk["input_dim"], sk["sketch_dim"], tables["h1"], tables["h2"], tables["s1"],
                          tables["s2"], sk["seed"])
    net = Network(spec, groups["params"], groups["buffers"], sketch, header["seed"], header["stage_done"])
    state = TrainState(groups["velocity"], header["epoch"])
    return net, state, header
