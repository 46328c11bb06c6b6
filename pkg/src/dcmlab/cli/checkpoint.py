"""Single-file checkpoints.

Layout (little endian):
  "DCMC" | u32 version | u32 header length | header JSON (sorted keys)
  per section: u32 name length | name | u32 record count | records
  per record: u16 name length | name | u8 group | u8 trainable | u8 ndim | u32 x ndim shape | f32 payload
  32-byte sha256 over everything before it
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..denoiser import ADAPTER_PREFIX, STAGES, DenoiserConfig, Model
from ..io_utils import atomic_write
from ..tensor_core import Group, ParamStore

MAGIC = b"DCMC"
VERSION = 1
_GROUPS = list(Group)
SECTION_ORDER = ("params", "adapters", "ema", "discriminator")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Model
    ema: ParamStore | None = None
    discriminator: ParamStore | None = None

    @property
    def stage(self) -> str:
        return self.model.stage


def required_sections(stage: str) -> set[str]:
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage {stage!r}")
    need = {"params"}
    if stage != "teacher":
        need.add("ema")
    if stage == "detail":
        need |= {"adapters", "discriminator"}
    return need


def _split(params: ParamStore) -> tuple[list[str], list[str]]:
    base = [n for n in params if not n.startswith(ADAPTER_PREFIX)]
    return base, [n for n in params if n.startswith(ADAPTER_PREFIX)]


def _records(store: ParamStore, names) -> bytes:
    out = [struct.pack("<I", len(names))]
    for n in names:
        arr = np.ascontiguousarray(store[n], dtype="<f4")
        raw = n.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BBB", _GROUPS.index(store.group(n)), int(store.trainable(n)), arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    m = ckpt.model
    base, adapters = _split(m.params)
    sections = {"params": (m.params, base)}
    if adapters:
        sections["adapters"] = (m.params, adapters)
    if ckpt.ema is not None:
        sections["ema"] = (ckpt.ema, list(ckpt.ema.names()))
    if ckpt.discriminator is not None:
        sections["discriminator"] = (ckpt.discriminator, list(ckpt.discriminator.names()))
    if set(sections) != required_sections(m.stage):
        raise CheckpointError(f"{m.stage} checkpoint needs sections {sorted(required_sections(m.stage))}, "
                              f"got {sorted(sections)}")
    header = {"model_config": asdict(m.config), "model_digest": m.config.digest(), "stage": m.stage,
              "iteration": m.iteration, "sections": [s for s in SECTION_ORDER if s in sections]}
    hjson = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(hjson)), hjson]
    for name in header["sections"]:
        store, names = sections[name]
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(_records(store, names))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    payload = checkpoint_bytes(ckpt)
    atomic_write(path, payload)
    return hashlib.sha256(payload).hexdigest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_records(r: _Reader, store: ParamStore) -> None:
    (count,) = r.unpack("<I")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        gidx, trainable, ndim = r.unpack("<BBB")
        if gidx >= len(_GROUPS) or trainable > 1:
            raise CheckpointError(f"bad record header for {name}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        try:
            store.add(name, arr, _GROUPS[gidx], bool(trainable))
        except KeyError as exc:
            raise CheckpointError(f"duplicate tensor {name}") from exc


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 44 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, stored = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != stored:
        raise CheckpointError("content digest mismatch (corrupt or tampered checkpoint)")
    r = _Reader(body)
    r.take(4)
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen))
        config = DenoiserConfig(**header["model_config"])
        stage, iteration, section_names = header["stage"], int(header["iteration"]), list(header["sections"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    if config.digest() != header.get("model_digest"):
        raise CheckpointError("model config digest mismatch")
    if set(section_names) != required_sections(stage):
        raise CheckpointError(f"{stage} checkpoint must carry sections {sorted(required_sections(stage))}, "
                              f"found {sorted(section_names)}")
    stores = {}
    params = ParamStore()
    for expected in section_names:
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        if name != expected:
            raise CheckpointError(f"section {name!r} out of order")
        if name in ("params", "adapters"):
            _read_records(r, params)
        else:
            stores[name] = ParamStore()
            _read_records(r, stores[name])
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after last section")
    model = Model(params, config, stage, iteration)
    return Checkpoint(model, stores.get("ema"), stores.get("discriminator"))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes())
