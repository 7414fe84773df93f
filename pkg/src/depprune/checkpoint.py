"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DPRN"                      magic
    u32 version                  currently 1
    u32 n, n bytes               config record, UTF-8 ``key=value`` lines
    u32 count                    number of tensors
    per tensor:
        u32 n, n bytes           name
        u32 rank
        rank x u64               dims
        8 * prod(dims) bytes     float64 payload, row-major
    u32 crc32                    zlib CRC32 of every preceding byte

The config record carries the model config, the live index lists, adapter
settings, and free-form ``meta.*`` entries.  It never holds a timestamp, so
identical models give identical files.
"""

import struct
import zlib
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import IntegrityError, VersionError
from .model import ModelConfig, TransformerModel

MAGIC = b"DPRN"
VERSION = 1
_MODEL_KEYS = ("vocab_size", "d_model", "n_heads", "d_ff", "n_layers", "max_seq", "norm_eps", "seed")
_LORA_SUFFIX = (".lora_P", ".lora_Q")


def _ints(arr):
    return ",".join(str(int(i)) for i in arr)


def _parse_ints(text):
    return np.array([int(x) for x in text.split(",") if x], dtype=np.int64)


def encode_model(model, meta=None):
    cfg = model.config
    lines = [f"model.{k}={getattr(cfg, k)!r}" for k in _MODEL_KEYS]
    lines.append(f"live.channels={_ints(model.live_channels)}")
    for l in range(cfg.n_layers):
        lines.append(f"live.heads.{l}={_ints(model.live_heads[l])}")
        lines.append(f"live.mlp.{l}={_ints(model.live_mlp[l])}")
    for name, a in model.adapters.items():
        lines.append(f"lora.{name}={a.rank},{a.alpha!r}")
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta.{k}={v}")
    record = ("\n".join(lines) + "\n").encode("utf-8")

    tensors = [(k, p.data) for k, p in model.params.items()]
    for name, a in model.adapters.items():
        tensors += [(name + _LORA_SUFFIX[0], a.P.data), (name + _LORA_SUFFIX[1], a.Q.data)]
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(record)), record,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), np.ascontiguousarray(arr, dtype="<f8").tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model, path, meta=None):
    data = encode_model(model, meta)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return len(data)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def decode_model(buf):
    """Inverse of :func:`encode_model`; returns ``(model, meta)``."""
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise IntegrityError("not a checkpoint (bad magic)")
    body, crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) != crc:
        raise IntegrityError("checkpoint CRC mismatch")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {VERSION}")
    record = r.take(r.u32()).decode("utf-8")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        if name in tensors:
            raise IntegrityError(f"duplicate tensor {name}")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(body):
        raise IntegrityError("trailing bytes after tensor table")

    fields = dict(line.split("=", 1) for line in record.splitlines() if line)
    cfg = ModelConfig(**{k: (float if k == "norm_eps" else int)(fields[f"model.{k}"]) for k in _MODEL_KEYS})
    L = cfg.n_layers
    params = {k: T.Tensor(v, requires_grad=True, name=k) for k, v in tensors.items() if not k.endswith(_LORA_SUFFIX)}
    model = TransformerModel(cfg, params, _parse_ints(fields["live.channels"]),
                             [_parse_ints(fields[f"live.heads.{l}"]) for l in range(L)],
                             [_parse_ints(fields[f"live.mlp.{l}"]) for l in range(L)])
    lora = {k[5:]: v for k, v in fields.items() if k.startswith("lora.")}
    if lora:
        from .recovery import LoraAdapter
        model.set_requires_grad(False)
        for name, spec in lora.items():
            rank, alpha = spec.split(",")
            model.adapters[name] = LoraAdapter(name, tensors[name + _LORA_SUFFIX[0]].copy(),
                                               tensors[name + _LORA_SUFFIX[1]].copy(), int(rank), float(alpha))
    meta = {k[5:]: v for k, v in fields.items() if k.startswith("meta.")}
    return model, meta


def load_checkpoint(path, with_meta=False):
    model, meta = decode_model(Path(path).read_bytes())
    return (model, meta) if with_meta else model
