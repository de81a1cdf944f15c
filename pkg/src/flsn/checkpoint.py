"""FLC1 checkpoints: model config, parameters, Adam moments, epoch.

Layout (all integers little-endian)::

    b"FLC1"
    u32 len, UTF-8 "key=value" lines     model config, first line format=1
    u32 count, then count x (u32 len, UTF-8 name, FLT1 blob)   parameters
    u32 count, then count x (u32 len, UTF-8 name, FLT1 blob)   moments "m:<p>" / "v:<p>"
    u64 optimizer step
    u32 epoch
"""
from __future__ import annotations

import os
import struct
from dataclasses import fields
from typing import TYPE_CHECKING

from .errors import LoadError
from .fileio import decode, encode
from .model import FLSN, ModelConfig
from .tensor import Tensor

if TYPE_CHECKING:
    from .train import OptimState

MAGIC = b"FLC1"
FORMAT_VERSION = 1


def _config_text(config: ModelConfig) -> str:
    lines = [f"format={FORMAT_VERSION}"]
    for f in fields(config):
        v = getattr(config, f.name)
        lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
    return "".join(line + "\n" for line in lines)


def _parse_config(text: str, source: str) -> ModelConfig:
    kv = dict(line.split("=", 1) for line in text.splitlines() if line)
    version = kv.pop("format", None)
    if version != str(FORMAT_VERSION):
        raise LoadError(f"{source}: unsupported checkpoint format {version!r}")
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in kv:
            raise LoadError(f"{source}: config block lacks {f.name!r}")
        raw = kv.pop(f.name)
        kwargs[f.name] = raw == "true" if f.type in (bool, "bool") else int(raw)
    if kv:
        raise LoadError(f"{source}: unknown config keys {sorted(kv)}")
    return ModelConfig(**kwargs)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _pack_named(items) -> bytes:
    out = [struct.pack("<I", len(items))]
    for name, arr in items:
        out.append(_pack_str(name))
        out.append(encode(arr))
    return b"".join(out)


def dumps(model: FLSN, state: "OptimState | None" = None, epoch: int = 0) -> bytes:
    parts = [MAGIC, _pack_str(_config_text(model.config))]
    parts.append(_pack_named([(n, t.data) for n, t in model.params.items()]))
    moments = []
    step = 0
    if state is not None:
        for name in model.params:
            moments.append((f"m:{name}", state.m[name]))
            moments.append((f"v:{name}", state.v[name]))
        step = state.step
    parts.append(_pack_named(moments))
    parts.append(struct.pack("<QI", step, epoch))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise LoadError(f"{self.source}: truncated checkpoint")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def string(self) -> str:
        (n,) = self.take("<I")
        if self.pos + n > len(self.buf):
            raise LoadError(f"{self.source}: truncated checkpoint")
        s = self.buf[self.pos : self.pos + n].decode("utf-8")
        self.pos += n
        return s

    def named(self):
        (count,) = self.take("<I")
        items = []
        for _ in range(count):
            name = self.string()
            arr, self.pos = decode(self.buf, self.pos, f"{self.source}:{name}")
            items.append((name, arr))
        return items


def loads(buf: bytes, source: str = "<bytes>"):
    """Inverse of :func:`dumps`; returns (model, state, epoch). state is None without moments."""
    from .train import OptimState

    if buf[:4] != MAGIC:
        raise LoadError(f"{source}: not an FLC1 checkpoint")
    r = _Reader(buf, source)
    r.pos = 4
    config = _parse_config(r.string(), source)
    params = {name: Tensor(arr, requires_grad=True, name=name, dtype=arr.dtype) for name, arr in r.named()}
    model = FLSN(config, params)
    moments = dict(r.named())
    step, epoch = r.take("<QI")
    if r.pos != len(buf):
        raise LoadError(f"{source}: {len(buf) - r.pos} trailing bytes")
    state = None
    if moments:
        try:
            state = OptimState(
                m={n: moments[f"m:{n}"] for n in params}, v={n: moments[f"v:{n}"] for n in params}, step=step
            )
        except KeyError as e:
            raise LoadError(f"{source}: missing optimizer moment {e.args[0]}") from None
    return model, state, epoch


def save_checkpoint(path: str | os.PathLike, model: FLSN, state=None, epoch: int = 0) -> None:
    data = dumps(model, state, epoch)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise LoadError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: str | os.PathLike):
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise LoadError(f"cannot read checkpoint {path}: {e}") from e
    return loads(buf, str(path))
