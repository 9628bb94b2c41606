"""Binary checkpoints of parameters, optimizer moments, RNG and stream state.

Layout (all integers little-endian)::

    8 bytes   magic  b"MAELMCK1"
    u32       format version
    32 bytes  sha256 of the canonical model-config JSON
    u32 + n   model config JSON
    u32 + n   meta JSON (step, run config, Adam step, RNG and stream state)
    u32       tensor count
    per tensor:
        u16 + n   UTF-8 name
        u8        ndim, then ndim x u64 dims
        f64[...]  values, little-endian, C order

Tensor order follows the parameter manifest: ``param/<name>`` for every
parameter, then ``adam.m/<name>``, then ``adam.v/<name>``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, param_manifest
from .tensor import Tensor

MAGIC = b"MAELMCK1"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def config_digest(cfg: ModelConfig) -> bytes:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).digest()


def _blob(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, state, cfg: ModelConfig, run) -> Path:
    """Write ``state`` (a :class:`~maelm.train.TrainState`) atomically to ``path``."""
    names = [n for n, _ in param_manifest(cfg)]
    meta = {
        "step": state.step,
        "run": run.to_dict(),
        "adam_t": state.adam.t,
        "rngs": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "stream": state.stream.state_dict(),
    }
    tensors = [(f"param/{n}", state.params[n].data) for n in names]
    tensors += [(f"adam.m/{n}", state.adam.m[n]) for n in names]
    tensors += [(f"adam.v/{n}", state.adam.v[n]) for n in names]
    parts = [MAGIC, struct.pack("<I", VERSION), config_digest(cfg), _blob(cfg.to_dict()), _blob(meta)]
    parts.append(struct.pack("<I", len(tensors)))
    parts += [_tensor_bytes(n, a) for n, a in tensors]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (n,) = self.unpack("<I")
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"malformed JSON section: {exc}") from None


@dataclass
class Checkpoint:
    config: ModelConfig
    meta: dict
    tensors: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return int(self.meta["step"])

    def params(self, include_decoder: bool = True) -> dict[str, Tensor]:
        out = {}
        for key, arr in self.tensors.items():
            group, name = key.split("/", 1)
            if group == "param" and (include_decoder or not name.startswith("dec.")):
                out[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        return out

    def restore(self, state) -> None:
        """Overwrite a training state in place with this checkpoint's contents."""
        from .train import AdamState

        params = self.params()
        adam = AdamState(
            {k.split("/", 1)[1]: a.copy() for k, a in self.tensors.items() if k.startswith("adam.m/")},
            {k.split("/", 1)[1]: a.copy() for k, a in self.tensors.items() if k.startswith("adam.v/")},
            int(self.meta["adam_t"]),
        )
        for name, t in params.items():
            state.params[name].data = t.data
            state.params[name].grad = None
        state.adam = adam
        for k, g in state.rngs.items():
            g.bit_generator.state = self.meta["rngs"][k]
        state.stream.load_state_dict(self.meta["stream"])
        state.step = self.step


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Parse and validate a checkpoint completely before returning anything.

    Raises a distinct :class:`CheckpointError` subclass for a bad magic,
    an unsupported version, a truncated file, or a config that does not
    match ``expected``.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    digest = r.take(32)
    cfg = ModelConfig.from_dict(r.json())
    if config_digest(cfg) != digest:
        raise CheckpointFormatError("stored config does not match its digest")
    if expected is not None and config_digest(expected) != digest:
        raise ConfigMismatchError("checkpoint was written for a different model config")
    meta = r.json()
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{len(r.data) - r.pos} trailing bytes after the last tensor")
    want = {f"{g}/{n}": s for g in ("param", "adam.m", "adam.v") for n, s in param_manifest(cfg)}
    if set(tensors) != set(want) or any(tensors[k].shape != tuple(s) for k, s in want.items()):
        raise CheckpointFormatError("tensor names or shapes disagree with the parameter manifest")
    return Checkpoint(cfg, meta, tensors)
