"""Named-tensor checkpoint archive.

Layout::

    b"STTS1" | uint32 LE manifest length | UTF-8 JSON manifest | payload

The manifest lists ``(name, shape, role)`` for every tensor in payload order,
plus a config snapshot, a step counter and free-form string metadata. The
payload is the concatenation of little-endian float32 tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
import torch
from torch import nn

from .config import RunConfig

MAGIC = b"STTS1"
ROLES = ("frozen", "trainable")


class CheckpointError(Exception):
    pass


class CorruptManifestError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    roles: dict[str, str]
    config: RunConfig | None = None
    step: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.tensors.items():
            if self.roles.get(name) not in ROLES:
                raise CheckpointError(f"tensor '{name}' has no valid role")
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"tensor '{name}' has non-finite values")
            self.tensors[name] = np.ascontiguousarray(arr, dtype="<f4").reshape(np.shape(arr))

    def names(self, role: str | None = None) -> list[str]:
        return [n for n in self.tensors if role is None or self.roles[n] == role]

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            {k: v.copy() for k, v in self.tensors.items()},
            dict(self.roles),
            self.config,
            self.step,
            json.loads(json.dumps(self.meta)),
        )


def _manifest(ckpt: Checkpoint) -> bytes:
    doc = {
        "tensors": [
            {"name": n, "shape": list(a.shape), "role": ckpt.roles[n]}
            for n, a in ckpt.tensors.items()
        ],
        "config": ckpt.config.to_dict() if ckpt.config is not None else None,
        "step": ckpt.step,
        "meta": ckpt.meta,
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    manifest = _manifest(ckpt)
    parts = [MAGIC, struct.pack("<I", len(manifest)), manifest]
    parts.extend(a.tobytes() for a in ckpt.tensors.values())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if blob[: len(MAGIC)] != MAGIC:
        raise CorruptManifestError(f"{source}: bad magic bytes")
    head = len(MAGIC) + 4
    if len(blob) < head:
        raise CorruptManifestError(f"{source}: missing manifest length")
    (mlen,) = struct.unpack("<I", blob[len(MAGIC) : head])
    if len(blob) < head + mlen:
        raise CorruptManifestError(f"{source}: manifest block truncated")
    try:
        doc = json.loads(blob[head : head + mlen].decode("utf-8"))
        entries = doc["tensors"]
        config = RunConfig.from_dict(doc["config"]) if doc["config"] is not None else None
        step = int(doc["step"])
        meta = doc["meta"]
        specs = [(e["name"], tuple(int(s) for s in e["shape"]), e["role"]) for e in entries]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CorruptManifestError(f"{source}: unreadable manifest ({exc})") from None
    for name, shape, role in specs:
        if role not in ROLES or any(s < 0 for s in shape):
            raise CorruptManifestError(f"{source}: invalid entry for '{name}'")

    payload = memoryview(blob)[head + mlen :]
    expected = sum(int(np.prod(shape)) * 4 for _, shape, _ in specs)
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{source}: payload has {len(payload)} bytes, manifest needs {expected}"
        )
    if len(payload) > expected:
        raise CorruptManifestError(
            f"{source}: {len(payload) - expected} trailing bytes after payload"
        )
    tensors, roles, offset = {}, {}, 0
    for name, shape, role in specs:
        n = int(np.prod(shape)) * 4
        tensors[name] = np.frombuffer(payload[offset : offset + n], dtype="<f4").reshape(shape).copy()
        roles[name] = role
        offset += n
    return Checkpoint(tensors, roles, config, step, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), source=str(path))


def module_checkpoint(
    module: nn.Module,
    config: RunConfig | None,
    *,
    prefix: str = "",
    trainable: Callable[[str], bool] | None = None,
    step: int = 0,
    meta: dict[str, Any] | None = None,
) -> Checkpoint:
    """Snapshot ``module.state_dict()``.

    Parameters are marked trainable unless ``trainable`` says otherwise;
    buffers are always frozen.
    """
    params = {n for n, _ in module.named_parameters()}
    tensors, roles = {}, {}
    for name, value in module.state_dict().items():
        key = prefix + name
        tensors[key] = value.detach().cpu().float().numpy().copy()
        is_trainable = name in params and (trainable is None or trainable(name))
        roles[key] = "trainable" if is_trainable else "frozen"
    return Checkpoint(tensors, roles, config, step, dict(meta or {}))


def load_module_state(module: nn.Module, ckpt: Checkpoint, prefix: str = "") -> None:
    """Copy tensors named ``prefix + key`` into ``module``, checking shapes."""
    state = module.state_dict()
    for name, current in state.items():
        key = prefix + name
        if key not in ckpt.tensors:
            raise ShapeMismatchError(f"checkpoint lacks tensor '{key}'")
        arr = ckpt.tensors[key]
        if tuple(arr.shape) != tuple(current.shape):
            raise ShapeMismatchError(
                f"tensor '{key}': checkpoint shape {tuple(arr.shape)} "
                f"!= module shape {tuple(current.shape)}"
            )
        with torch.no_grad():
            current.copy_(torch.from_numpy(arr.copy()).to(current.dtype))


def merge(checkpoints: Iterable[Checkpoint], config: RunConfig | None = None, **kw) -> Checkpoint:
    tensors, roles = {}, {}
    for ck in checkpoints:
        for name in ck.tensors:
            if name in tensors:
                raise CheckpointError(f"duplicate tensor '{name}'")
            tensors[name] = ck.tensors[name]
            roles[name] = ck.roles[name]
    return Checkpoint(tensors, roles, config, **kw)
