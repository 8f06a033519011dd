"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset 0   4 bytes   magic b"GERM"
    offset 4   u32       format version (currently 1)
    offset 8   u64       header length H in bytes
    offset 16  H bytes   UTF-8 canonical JSON header
    offset 16+H          payload: tensors back to back, little-endian

The header holds ``kind`` ("model" or "adapters"), ``config``, ``step``,
``variant``, free-form ``meta`` and a ``manifest`` list of
``{name, shape, dtype, offset, nbytes}`` with offsets relative to the start of
the payload. Tensors are stored as f32 unless the checkpoint asks for f64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import ModelConfig
from .errors import BadMagic, CorruptManifest, VersionUnsupported
from .jsonio import atomic_write_bytes, dumps

MAGIC = b"GERM"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: ModelConfig | None
    params: dict[str, np.ndarray]
    step: int = 0
    kind: str = "model"
    dtype: str = "f32"
    meta: dict = field(default_factory=dict)

    @property
    def variant(self) -> str | None:
        return None if self.config is None else self.config.variant.value

    def copy(self, **changes) -> "Checkpoint":
        fields = dict(config=self.config, params={k: v.copy() for k, v in self.params.items()},
                      step=self.step, kind=self.kind, dtype=self.dtype, meta=json.loads(dumps(self.meta)))
        fields.update(changes)
        return Checkpoint(**fields)


def to_bytes(ckpt: Checkpoint) -> bytes:
    if ckpt.dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {ckpt.dtype}")
    dt = _DTYPES[ckpt.dtype]
    manifest = []
    chunks = []
    offset = 0
    for name in ckpt.params:
        arr = np.ascontiguousarray(ckpt.params[name], dtype=dt)
        raw = arr.tobytes(order="C")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": ckpt.dtype,
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "kind": ckpt.kind,
        "config": None if ckpt.config is None else ckpt.config.to_dict(),
        "step": int(ckpt.step),
        "variant": ckpt.variant,
        "dtype": ckpt.dtype,
        "meta": ckpt.meta,
        "manifest": manifest,
        "payload_bytes": offset,
    }
    hbytes = dumps(header).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not a checkpoint file (bad magic)")
    if len(data) < _PREFIX.size:
        raise CorruptManifest("file truncated inside the fixed prefix")
    _, version, hlen = _PREFIX.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"format version {version} not supported (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise CorruptManifest("file truncated inside the header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptManifest(f"unreadable header: {exc}") from exc
    payload = memoryview(data)[start + hlen:]
    total = header.get("payload_bytes")
    if total != len(payload):
        raise CorruptManifest(f"payload is {len(payload)} bytes, header declares {total}")

    params = {}
    spans = []
    for entry in header.get("manifest", []):
        dt = _DTYPES.get(entry.get("dtype"))
        if dt is None:
            raise CorruptManifest(f"unknown dtype in manifest entry {entry.get('name')}")
        shape = tuple(int(s) for s in entry["shape"])
        off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CorruptManifest(f"{entry['name']}: byte count does not match shape")
        if off < 0 or off + nbytes > len(payload):
            raise CorruptManifest(f"{entry['name']}: out-of-bounds offset")
        spans.append((off, off + nbytes, entry["name"]))
        arr = np.frombuffer(payload[off:off + nbytes], dtype=dt).reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CorruptManifest(f"overlapping tensors {an} and {bn}")

    cfg = header.get("config")
    return Checkpoint(
        config=None if cfg is None else ModelConfig.from_dict(cfg),
        params=params,
        step=int(header.get("step", 0)),
        kind=header.get("kind", "model"),
        dtype=header.get("dtype", "f32"),
        meta=header.get("meta", {}),
    )


def save(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, to_bytes(ckpt))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
