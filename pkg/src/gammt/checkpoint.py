"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GAMMT\\0"                       magic
    u32 version                       currently 1
    u32 n, n bytes                    UTF-8 header of key=value lines
    repeated per tensor:
        u16 n, n bytes                name, e.g. "head0.layer0.mlp.w1"
        u8 rank, rank * u64           dims
        float32 * prod(dims)          values, row-major

Parameters are computed in float64 and stored as float32.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .decoder import DecoderConfig, DecoderParams
from .ensemble import GammtParams
from .errors import CheckpointFormatError

MAGIC = b"GAMMT\0"
VERSION = 1


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _join(values) -> str:
    return ",".join(str(v) for v in values)


def model_header(params: GammtParams) -> dict[str, str]:
    c0 = params.heads[0].config
    return {
        "heads": str(params.n_heads),
        "layers": _join(h.config.n_layers for h in params.heads),
        "attn_heads": _join(h.config.n_heads for h in params.heads),
        "d_e": str(c0.d_e),
        "d_mlp": str(c0.d_mlp),
        "l_max": str(c0.l_max),
        "n_vocab": str(c0.n_vocab),
        "activation": c0.activation,
    }


def encode_checkpoint(params: GammtParams, extra: dict | None = None) -> bytes:
    header = model_header(params)
    for k, v in (extra or {}).items():
        header.setdefault(k, str(v))
    tensors = [(f"head{m}.{name}", head.weights[name])
               for m, head in enumerate(params.heads)
               for name in head.config.param_shapes()]
    header["tensors"] = str(len(tensors))
    text = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text]
    for name, w in tensors:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", w.ndim))
        out.append(struct.pack(f"<{w.ndim}Q", *w.shape))
        out.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(params: GammtParams, path, extra: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(params, extra))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _ints(header, key, offset) -> list[int]:
    try:
        return [int(v) for v in header[key].split(",")]
    except (KeyError, ValueError):
        raise CheckpointFormatError(f"header field {key!r} missing or malformed", offset) from None


def decode_checkpoint(data: bytes) -> tuple[GammtParams, dict[str, str]]:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", r.pos - 4)
    (n,) = r.unpack("<I", "header length")
    header_at = r.pos
    try:
        text = r.take(n, "header").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointFormatError("header is not UTF-8", header_at) from None
    header = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"malformed header line {line!r}", header_at)
        header[key] = value

    M = _ints(header, "heads", header_at)[0]
    layers = _ints(header, "layers", header_at)
    attn = _ints(header, "attn_heads", header_at)
    if len(layers) != M or len(attn) != M:
        raise CheckpointFormatError("per-head header lists do not match head count", header_at)
    try:
        configs = [DecoderConfig(
            n_vocab=_ints(header, "n_vocab", header_at)[0],
            l_max=_ints(header, "l_max", header_at)[0],
            d_e=_ints(header, "d_e", header_at)[0],
            d_mlp=_ints(header, "d_mlp", header_at)[0],
            n_layers=layers[m], n_heads=attn[m],
            activation=header.get("activation", "gelu"),
        ) for m in range(M)]
    except ValueError as exc:
        raise CheckpointFormatError(f"invalid hyperparameters: {exc}", header_at) from None

    tensors = {}
    while r.pos < len(data):
        start = r.pos
        (ln,) = r.unpack("<H", "tensor name length")
        name = r.take(ln, "tensor name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(4 * count, f"values of {name}")
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor {name}", start)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)

    expected = _ints(header, "tensors", header_at)[0]
    if len(tensors) != expected:
        raise CheckpointFormatError(
            f"found {len(tensors)} tensors, header declares {expected}", r.pos)
    heads = []
    for m, cfg in enumerate(configs):
        weights = {}
        for name, shape in cfg.param_shapes().items():
            full = f"head{m}.{name}"
            if full not in tensors:
                raise CheckpointFormatError(f"missing tensor {full}", r.pos)
            if tensors[full].shape != shape:
                raise CheckpointFormatError(
                    f"tensor {full} has shape {tensors[full].shape}, expected {shape}", r.pos)
            weights[name] = tensors[full]
        heads.append(DecoderParams(cfg, weights))
    return GammtParams(heads), header


def read_checkpoint(path) -> tuple[GammtParams, dict[str, str]]:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path) -> GammtParams:
    return read_checkpoint(path)[0]
