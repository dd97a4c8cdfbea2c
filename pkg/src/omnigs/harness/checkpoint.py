"""Binary checkpoint container.

Layout: ``OMNI1`` magic, little-endian u32 format version, u64 header length,
a canonical JSON header (config, step, RNG state, tensor table), then every
tensor listed in the header as raw little-endian float64 values.
"""
from __future__ import annotations

import base64
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..diffcore.optim import ParameterStore
from .config import ConfigError, RunConfig

MAGIC = b"OMNI1"
VERSION = 1
GROUPS = ("params", "exp_avg", "exp_avg_sq")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    params: "OrderedDict[str, np.ndarray]"
    exp_avg: "OrderedDict[str, np.ndarray]"
    exp_avg_sq: "OrderedDict[str, np.ndarray]"
    rng: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, config: RunConfig, store: ParameterStore, rng: np.random.Generator, meta=None) -> "Checkpoint":
        grab = lambda d: OrderedDict((k, v.detach().to(torch.float64).numpy().copy()) for k, v in d.items())
        return cls(config, store.step, grab(store.params), grab(store.exp_avg), grab(store.exp_avg_sq),
                   rng_state(rng), dict(meta or {}))

    def restore(self, store: ParameterStore) -> None:
        """Copy parameters and optimizer moments into ``store`` (names and shapes must match)."""
        if list(store.params) != list(self.params):
            raise CheckpointError("checkpoint parameter names do not match the model")
        dtype = next(iter(store.params.values())).dtype
        as_t = lambda d: OrderedDict((k, torch.as_tensor(v, dtype=dtype)) for k, v in d.items())
        store.load_state_dict({"step": self.step, "params": as_t(self.params),
                               "exp_avg": as_t(self.exp_avg), "exp_avg_sq": as_t(self.exp_avg_sq)})

    def generator(self) -> np.random.Generator:
        return make_generator(self.rng)


def rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state,
            "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")}


def make_generator(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["numpy"]["bit_generator"])()
    bg.state = state["numpy"]
    torch.set_rng_state(torch.from_numpy(np.frombuffer(base64.b64decode(state["torch"]), dtype=np.uint8).copy()))
    return np.random.Generator(bg)


def to_bytes(ck: Checkpoint) -> bytes:
    table, blobs = [], []
    for g in GROUPS:
        for name, arr in getattr(ck, g).items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            table.append({"group": g, "name": name, "shape": list(a.shape)})
            blobs.append(a.tobytes())
    header = {"config": ck.config.to_dict(), "step": ck.step, "rng": ck.rng, "meta": ck.meta, "tensors": table}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + b"".join(blobs)


def from_bytes(data: bytes) -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, off)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    groups = {g: OrderedDict() for g in GROUPS}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if off + 8 * n > len(data):
            raise CheckpointError("truncated checkpoint")
        groups[t["group"]][t["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(t["shape"]).copy()
        off += 8 * n
    if off != len(data):
        raise CheckpointError("trailing bytes after tensor data")
    try:
        cfg = RunConfig.from_dict(header["config"])
    except ConfigError as e:
        raise CheckpointError(f"embedded config invalid: {e}") from e
    return Checkpoint(cfg, int(header["step"]), groups["params"], groups["exp_avg"], groups["exp_avg_sq"],
                      header["rng"], header.get("meta", {}))


def save_checkpoint(path, ck: Checkpoint) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(p)
    return p


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
