"""Versioned binary checkpoint container.

Layout: 8 magic bytes, uint32 version, uint64 header length, a UTF-8 JSON
header (shape table, spec, config, rng state, metrics), then the raw
little-endian float64 data of every array in header order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff.tape import ParamVector
from ..io.files import write_bytes
from .optim import AdamState

MAGIC = b"MSACKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParamVector
    buffers: dict
    opt: AdamState
    epoch: int
    rng_state: dict
    metrics: list = field(default_factory=list)
    spec: dict | None = None
    config: dict | None = None
    tag: str = ""

    @property
    def step(self) -> int:
        return self.opt.step

    def _arrays(self):
        for name, a in self.params.items():
            yield "params", name, a
        for path in sorted(self.buffers):
            for stat in ("mean", "var"):
                yield "buffers", f"{path}/{stat}", self.buffers[path][stat]
        for name, a in self.opt.m.items():
            yield "m", name, a
        for name, a in self.opt.v.items():
            yield "v", name, a

    def to_bytes(self) -> bytes:
        table, blobs = [], []
        for group, name, a in self._arrays():
            a = np.ascontiguousarray(a, dtype="<f8")
            table.append([group, name, list(a.shape)])
            blobs.append(a.tobytes())
        header = {
            "arrays": table, "epoch": self.epoch, "step": self.opt.step,
            "rng_state": self.rng_state, "metrics": self.metrics,
            "spec": self.spec, "config": self.config, "tag": self.tag,
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> Checkpoint:
        if raw[:8] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        if len(raw) < 20:
            raise CheckpointError("truncated checkpoint header")
        version, hlen = struct.unpack("<IQ", raw[8:20])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
        pos = 20 + hlen
        groups = {"params": [], "buffers": {}, "m": [], "v": []}
        for group, name, shape in header["arrays"]:
            n = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + n > len(raw):
                raise CheckpointError(f"truncated data for {group}:{name}")
            a = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += n
            if group == "buffers":
                path, stat = name.rsplit("/", 1)
                groups["buffers"].setdefault(path, {})[stat] = a
            else:
                groups[group].append((name, a))
        if pos != len(raw):
            raise CheckpointError("trailing bytes after checkpoint data")
        opt = AdamState(ParamVector(groups["m"]), ParamVector(groups["v"]), header["step"])
        return cls(ParamVector(groups["params"]), groups["buffers"], opt, header["epoch"],
                   header["rng_state"], header["metrics"], header["spec"], header["config"],
                   header.get("tag", ""))

    def save(self, path) -> Path:
        return write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())

    def restore_model(self, model):
        """Load parameters and normalization statistics into ``model``."""
        model.load_state(self.params, self.buffers)
        return model
