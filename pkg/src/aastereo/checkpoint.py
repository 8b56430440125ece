"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"AASTEREO"            magic
    u32                    format version
    u32 n, n bytes         config block, UTF-8 "key = value" lines
    u32 n, n bytes         RNG state, JSON (may be empty)
    u32                    parameter count
      u32 n, n bytes       parameter name
      u32 ndim, ndim x u32 shape
      prod(shape) x f64    values
    u32                    1 if optimizer moments follow, else 0
      u64 step, f64 lr, then first and second moments per parameter (f64)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import StereoModel, ModelConfig
from .train import Adam

MAGIC = b"AASTEREO"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_text(cfg: ModelConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


def _parse_config(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"config block line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_checkpoint(model: StereoModel, path, optimizer: Adam | None = None, rng_state: dict | None = None) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    cfg = _config_text(model.config).encode()
    chunks += [struct.pack("<I", len(cfg)), cfg]
    rng = json.dumps(rng_state or {}, sort_keys=True).encode()
    chunks += [struct.pack("<I", len(rng)), rng]
    named = model.named_parameters()
    chunks.append(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode()
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", p.data.ndim),
                   struct.pack(f"<{p.data.ndim}I", *p.data.shape), p.data.astype("<f8").tobytes()]
    if optimizer is None:
        chunks.append(struct.pack("<I", 0))
    else:
        chunks += [struct.pack("<I", 1), struct.pack("<Qd", optimizer.t, optimizer.lr)]
        for m in optimizer.m:
            chunks.append(m.astype("<f8").tobytes())
        for v in optimizer.v:
            chunks.append(v.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, config: ModelConfig | None = None, with_state: bool = False):
    """Rebuild the model stored at ``path``.

    If ``config`` is given the stored parameters must fit it (the first
    mismatching parameter is named). With ``with_state`` returns
    ``(model, optimizer_state_dict_or_None, rng_state)``.
    """
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    (n,) = r.unpack("<I", "config length")
    stored = ModelConfig.from_dict(_parse_config(r.take(n, "config block").decode()))
    (n,) = r.unpack("<I", "rng length")
    rng_state = json.loads(r.take(n, "rng state").decode() or "{}")
    model = StereoModel(config or stored)
    named = model.named_parameters()
    (count,) = r.unpack("<I", "parameter count")
    values = []
    for i in range(count):
        (n,) = r.unpack("<I", "name length")
        name = r.take(n, "parameter name").decode()
        (ndim,) = r.unpack("<I", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * size, f"{name} values"), dtype="<f8").reshape(shape)
        if i >= len(named) or named[i][0] != name or named[i][1].shape != tuple(shape):
            expect = f"{named[i][0]} {named[i][1].shape}" if i < len(named) else "nothing"
            raise CheckpointError(f"{path}: parameter {name} {tuple(shape)} does not match model ({expect})")
        values.append(data)
    if count != len(named):
        raise CheckpointError(f"{path}: {count} parameters stored, model has {len(named)}; "
                              f"first missing: {named[count][0]}")
    for (_, p), data in zip(named, values):
        p.data = data.astype(np.float64)
    (has_opt,) = r.unpack("<I", "optimizer flag")
    opt_state = None
    if has_opt:
        t, lr = r.unpack("<Qd", "optimizer header")
        m = [np.frombuffer(r.take(8 * p.data.size, "moment"), "<f8").reshape(p.shape).copy() for _, p in named]
        v = [np.frombuffer(r.take(8 * p.data.size, "moment"), "<f8").reshape(p.shape).copy() for _, p in named]
        opt_state = {"t": t, "lr": lr, "m": m, "v": v}
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    if with_state:
        return model, opt_state, rng_state
    return model


def restore_optimizer(opt: Adam, state: dict) -> None:
    opt.t, opt.lr = state["t"], state["lr"]
    opt.m = [a.copy() for a in state["m"]]
    opt.v = [a.copy() for a in state["v"]]
