"""Single-file binary checkpoints.

Layout (all little-endian)::

    b"IDEN"  u32 version
    u32 meta_len   meta_len bytes of UTF-8 JSON (sorted keys)
    u32 count
    count x { u32 name_len, name, u32 ndim, ndim x u32 dims, float32 data }

Tensor names are parameter names, ``<bn>.running_mean``/``<bn>.running_var``
buffers and ``velocity/<param>`` optimizer slots.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .blocks import Layer
from .config import BackboneConfig
from .model import IdenNet, PretrainNet, Variant

MAGIC = b"IDEN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str                      # "pretrain" or "finetune"
    backbone: BackboneConfig
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    def velocity(self) -> dict[str, np.ndarray]:
        return {k.split("/", 1)[1]: v for k, v in self.tensors.items() if k.startswith("velocity/")}


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta, kind=ckpt.kind, backbone=asdict(ckpt.backbone))
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, _u32(ckpt.format_version), _u32(len(meta_bytes)), meta_bytes, _u32(len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)] + [_u32(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an IDEN checkpoint (bad magic)")
    pos = 4

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(blob):
            raise CheckpointError("truncated checkpoint")
        (v,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        return v

    version = u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    n = u32()
    meta = json.loads(blob[pos : pos + n].decode("utf-8"))
    pos += n
    tensors: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        n = u32()
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name}")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape, dtype=np.int64))
        if pos + 4 * count > len(blob):
            raise CheckpointError(f"truncated data for tensor {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
        pos += 4 * count
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    kind = meta.pop("kind")
    backbone = BackboneConfig(**meta.pop("backbone"))
    return Checkpoint(kind, backbone, tensors, meta, version)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# model <-> tensors


def state_tensors(net: Layer) -> dict[str, np.ndarray]:
    out = {p.name: p.data for p in net.parameters()}
    for bn in net.batch_norms():
        out.update(bn.buffers())
    return out


def load_state(net: Layer, tensors: dict[str, np.ndarray]) -> None:
    expected = {p.name: p for p in net.parameters()}
    for name, p in expected.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing {name}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {tensors[name].shape} != model {p.shape}")
        p.data = tensors[name].astype(np.float32).copy()
    for bn in net.batch_norms():
        bn.stats.mean = tensors[f"{bn.name}.running_mean"].copy()
        bn.stats.var = tensors[f"{bn.name}.running_var"].copy()


def from_pretrain(net: PretrainNet, velocity: dict[str, np.ndarray] | None = None, **meta) -> Checkpoint:
    tensors = state_tensors(net)
    for name, v in (velocity or {}).items():
        tensors[f"velocity/{name}"] = v
    meta = dict(meta, task=net.task, num_classes=net.num_classes)
    return Checkpoint("pretrain", net.backbone, tensors, meta)


def to_pretrain(ckpt: Checkpoint) -> PretrainNet:
    if ckpt.kind != "pretrain":
        raise CheckpointError(f"expected a pretrain checkpoint, got {ckpt.kind}")
    net = PretrainNet(ckpt.meta["task"], ckpt.backbone, int(ckpt.meta["num_classes"]), np.random.default_rng(0))
    load_state(net, ckpt.tensors)
    return net


def from_model(model: IdenNet, velocity: dict[str, np.ndarray] | None = None, **meta) -> Checkpoint:
    tensors = state_tensors(model)
    for name, v in (velocity or {}).items():
        tensors[f"velocity/{name}"] = v
    meta = dict(meta, variant=model.variant.value, num_expressions=model.num_expressions,
                num_identities=model.num_identities, frozen=sorted(model.frozen_set))
    return Checkpoint("finetune", model.backbone, tensors, meta)


def to_model(ckpt: Checkpoint) -> IdenNet:
    if ckpt.kind != "finetune":
        raise CheckpointError(f"expected a finetune checkpoint, got {ckpt.kind}")
    m = ckpt.meta
    model = IdenNet(Variant.parse(m["variant"]), ckpt.backbone, int(m["num_expressions"]),
                    m.get("num_identities"), np.random.default_rng(0))
    load_state(model, ckpt.tensors)
    params = {p.name: p for p in model.parameters()}
    for name in m.get("frozen", []):
        params[name].freeze()
        model.frozen_set.add(name)
    return model
