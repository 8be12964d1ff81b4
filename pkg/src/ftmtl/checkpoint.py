"""Binary checkpoint files.

Layout::

    8 bytes   magic b"FTMTLCKP"
    u32 LE    format version
    u32 LE    header length in bytes
    header    UTF-8 JSON: tensor manifest (name, dtype, shape, offset, nbytes),
              config text (``key = value`` lines), phase marker, rng state
    data      raw little-endian float32 tensors at the manifest offsets
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .model import FTMTLNet

MAGIC = b"FTMTLCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, expected: int = VERSION):
        super().__init__(f"checkpoint format version {found} is not supported (this build reads version {expected})")
        self.found, self.expected = found, expected


@dataclass
class Checkpoint:
    model: FTMTLNet
    config: RunConfig
    phase: str
    rng_state: dict | None

    def rng(self) -> np.random.Generator | None:
        if self.rng_state is None:
            return None
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g


def _jsonable_state(state):
    if isinstance(state, dict):
        return {k: _jsonable_state(v) for k, v in state.items()}
    if isinstance(state, (np.integer,)):
        return int(state)
    return state


def save_checkpoint(
    model: FTMTLNet, path, config: RunConfig | None = None, phase: str = "D", rng: np.random.Generator | None = None
) -> Path:
    """Write ``model`` with its config, phase marker and (optionally) rng state."""
    config = config or RunConfig.from_model_config(model.config)
    manifest, blobs, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        manifest.append({"name": name, "dtype": "<f4", "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "tensors": manifest,
        "config": config.to_text(),
        "phase": phase,
        "rng": None if rng is None else _jsonable_state(rng.bit_generator.state),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint; raises :class:`CheckpointError` on any malformation."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(version)
    start = _PREFIX.size + head_len
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size : start].decode("utf-8"))
        tensors = header["tensors"]
        config = RunConfig.from_text(header["config"])
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    data = memoryview(raw)[start:]
    state = {}
    for t in tensors:
        end = t["offset"] + t["nbytes"]
        if end > len(data):
            raise CheckpointError(f"{path}: truncated data for tensor {t['name']}")
        arr = np.frombuffer(data[t["offset"] : end], dtype=np.dtype(t["dtype"]))
        state[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    model = FTMTLNet(config.model_config())
    missing = sorted(set(model.params) - set(state))
    if missing:
        raise CheckpointError(f"{path}: missing tensors: {', '.join(missing)}")
    try:
        model.load_state_dict(state)
    except ValueError as e:
        raise CheckpointError(f"{path}: {e}") from None
    return Checkpoint(model, config, header.get("phase", "?"), header.get("rng"))
