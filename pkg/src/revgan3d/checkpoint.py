"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"RG3D"  u32 version  u32 header_len  header (canonical JSON, utf-8)
    u32 blob_count
    per blob: u16 name_len, name, u8 tag_len, dtype tag, u8 ndim,
              u32 dims[ndim], raw little-endian elements
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"RG3D"
VERSION = 1
_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_TAG_OF = {np.dtype("float32"): "f32", np.dtype("float64"): "f64", np.dtype("int64"): "i64"}


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_container(path, header: dict, blobs) -> Path:
    """Write `header` and the ``(name, array)`` pairs in `blobs` atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs = list(blobs)
    hdr = canonical_json(header)
    parts = [MAGIC, struct.pack("<II", VERSION, len(hdr)), hdr, struct.pack("<I", len(blobs))]
    for name, arr in blobs:
        arr = np.asarray(arr)
        tag = _TAG_OF.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise FormatError(f"blob {name!r}: unsupported dtype {arr.dtype}")
        key = name.encode()
        parts += [struct.pack("<H", len(key)), key, struct.pack("<B", len(tag)), tag.encode(),
                  struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape),
                  np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated at byte {self.pos} (needed {n} more, "
                              f"{len(self.buf) - self.pos} available)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_container(path):
    """Returns ``(header, blobs)`` with blobs an ordered name -> array dict."""
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not an RG3D checkpoint")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(r.take(hlen).decode())
    (count,) = r.unpack("<I")
    blobs = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (tlen,) = r.unpack("<B")
        tag = r.take(tlen).decode()
        if tag not in _TAGS:
            raise FormatError(f"{path}: blob {name!r} has unknown dtype tag {tag!r}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape)
        blobs[name] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return header, blobs


def save_model(path, model, state=None, extra_blobs=()):
    header = {"model_config": model.config.to_dict(), "memory": model.memory,
              "state": state or {}}
    blobs = [(f"param/{n}", p.data) for n, p in model.named_parameters()]
    return save_container(path, header, blobs + list(extra_blobs))


def load_model(path, memory=None):
    """Rebuild a :class:`RevGANModel` from a checkpoint; returns ``(model, header, blobs)``."""
    from .model import ModelConfig, RevGANModel

    header, blobs = load_container(path)
    config = ModelConfig.from_dict(header["model_config"])
    # initial values are overwritten, so a fixed generator is fine here
    model = RevGANModel(config, rng=np.random.default_rng(0),
                        memory=memory or header.get("memory", "reversible"))
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in blobs:
            raise FormatError(f"{path}: missing parameter {name!r}")
        if blobs[key].shape != p.shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {blobs[key].shape}, "
                              f"model expects {p.shape}")
        p.data = blobs[key].astype(p.dtype)
    return model, header, blobs
