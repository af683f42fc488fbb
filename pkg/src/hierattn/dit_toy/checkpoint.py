"""Versioned binary checkpoints for :class:`ToyDiT`.

Layout (little-endian): magic ``HDIT``, u16 version, u32 config length,
config JSON, u32 tensor count, then per tensor: u16 name length, name,
u8 dtype code, u8 ndim, ndim x u32 shape, raw bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import ConfigError, SizeError
from .model import ToyDiT

MAGIC = b"HDIT"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {v: k for k, v in _CODES.items()}


def model_config(model: ToyDiT) -> dict:
    return dict(
        channels=model.channels, width=model.width, heads=model.heads, depth=model.depth,
        vocab=model.vocab, rank=model.blocks[0].lora_q.rank, dtype=model.dtype.name,
        rope_base=model.rope.base,
    )


def save_checkpoint(model: ToyDiT, path, extra: dict | None = None) -> None:
    cfg = json.dumps({"model": model_config(model), "extra": extra or {}}, sort_keys=True).encode()
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            a = np.ascontiguousarray(params[name], dtype=params[name].dtype.newbyteorder("<"))
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<BB", _CODES[a.dtype], a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, tensors)`` without building a model."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    header = json.loads(buf[off:off + n])
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2:off + 2 + ln].decode()
        off += 2 + ln
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + size > len(buf):
            raise SizeError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(buf, dt, int(np.prod(shape, dtype=np.int64)), off).reshape(shape).copy()
        off += size
    if off != len(buf):
        raise SizeError(f"{path}: {len(buf) - off} trailing bytes")
    return header, tensors


def load_checkpoint(path, expect: dict | None = None) -> ToyDiT:
    """Rebuild the model; ``expect`` (a partial config) must match the stored one."""
    header, tensors = read_checkpoint(path)
    cfg = header["model"]
    for k, v in (expect or {}).items():
        if cfg.get(k) != v:
            raise ConfigError(f"checkpoint {k}={cfg.get(k)!r} incompatible with requested {v!r}")
    model = ToyDiT(
        channels=cfg["channels"], width=cfg["width"], heads=cfg["heads"], depth=cfg["depth"],
        vocab=cfg["vocab"], rank=cfg["rank"], dtype=np.dtype(cfg["dtype"]), rope_base=cfg["rope_base"],
    )
    model.load_parameters(tensors)
    return model
