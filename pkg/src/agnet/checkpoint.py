"""Versioned binary checkpoints with a CRC32 integrity trailer.

Layout (all integers little-endian):

    magic          8 bytes  b"AGNET1\\0\\0"
    version        u32      currently 1
    meta_len       u32      followed by meta_len bytes of UTF-8 JSON
    record_count   u32
    records        name_len u32, name UTF-8, rank u32, rank x extent u64,
                   payload as little-endian float32
    crc32          u32      over every preceding byte

The metadata JSON carries num_classes, channels, kappa, image_size, seed,
epoch, and backbone_stages. Parameter records appear in the canonical
``named_parameters`` order; optimizer velocity buffers follow with a
``velocity/`` name prefix so resumed runs reproduce an uninterrupted one.
Payloads are float32: loading yields float32 tensors, and saving float32
training state round-trips bitwise.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .network import AgNetParams, init_params
from .optim import SgdState

MAGIC = b"AGNET1\x00\x00"
VERSION = 1
_VELOCITY_PREFIX = "velocity/"


def _pack_record(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    head = struct.pack("<I", len(encoded)) + encoded
    head += struct.pack("<I", array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape) if array.ndim else b""
    return head + payload


def save_checkpoint(path, params: AgNetParams, metadata: dict,
                    state: SgdState | None = None) -> None:
    """Serialize parameters (and optimizer velocities, if given)."""
    records = [(name, t.data) for name, t in params.named_parameters()]
    if state is not None:
        for name, _ in params.named_parameters():
            v = state.velocities.get(name)
            if v is not None:
                records.append((_VELOCITY_PREFIX + name, v))

    meta = dict(metadata)
    meta.setdefault("num_classes", params.num_classes)
    meta.setdefault("channels", params.channels)
    meta.setdefault("backbone_stages", params.backbone.stages)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    body += struct.pack("<I", len(meta_bytes)) + meta_bytes
    body += struct.pack("<I", len(records))
    for name, arr in records:
        body += _pack_record(name, arr)
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"checkpoint {self.path} is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]


def load_checkpoint(path) -> tuple[AgNetParams, SgdState, dict]:
    """Restore parameters, optimizer velocities, and metadata.

    Any flipped byte fails the trailing CRC32 check; unknown versions and
    malformed records raise :class:`CheckpointError`.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError(f"checkpoint {path} is truncated")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"checkpoint {path} failed its integrity check")

    r = _Reader(blob[:-4], path)
    if r.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"checkpoint {path} has a bad magic header")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"checkpoint {path} has unsupported version {version}")
    meta_len = r.u32()
    try:
        meta = json.loads(r.read(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} has corrupt metadata: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.read(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.read(8 * rank)) if rank else ()
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.read(4 * count)
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != len(r.blob):
        raise CheckpointError(f"checkpoint {path} has {len(r.blob) - r.pos} trailing bytes")

    for key in ("num_classes", "channels", "backbone_stages"):
        if key not in meta:
            raise CheckpointError(f"checkpoint {path} metadata lacks '{key}'")
    params = init_params(num_classes=int(meta["num_classes"]),
                         channels=int(meta["channels"]),
                         stages=int(meta["backbone_stages"]),
                         seed=0, dtype=np.float32)
    velocities: dict[str, np.ndarray] = {}
    expected = {name for name, _ in params.named_parameters()}
    for name, arr in arrays.items():
        if name.startswith(_VELOCITY_PREFIX):
            velocities[name[len(_VELOCITY_PREFIX):]] = arr
            continue
        if name not in expected:
            raise CheckpointError(f"checkpoint {path} has unexpected tensor '{name}'")
    for name, t in params.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"checkpoint {path} is missing tensor '{name}'")
        arr = arrays[name]
        if arr.shape != t.shape:
            raise CheckpointError(
                f"checkpoint {path} tensor '{name}' has shape {arr.shape}, expected {t.shape}")
        t.data = arr
    state = SgdState(learning_rate=float(meta.get("lr", 1e-5)),
                     momentum=float(meta.get("momentum", 0.99)),
                     decay_factor=float(meta.get("decay_factor", 0.1)),
                     decay_period_epochs=int(meta.get("decay_every", 25)),
                     velocities=velocities)
    return params, state, meta
