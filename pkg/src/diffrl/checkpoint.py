"""Binary checkpoint container.

Layout (little-endian):
    bytes 0..4    magic b"DFTN"
    bytes 4..8    u32 format version
    bytes 8..12   u32 header length H
    bytes 12..20  u64 payload length P
    H bytes       UTF-8 JSON header (sorted keys): metadata plus an ordered array table
    P bytes       float64 arrays, concatenated in array-table order
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DenoiserParams
from .optim import AdamWState
from .rewards import RunningStats
from .rl import TrainerState, _rng_streams

MAGIC = b"DFTN"
VERSION = 1
_PREFIX = struct.Struct("<4sIIQ")


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: DenoiserParams
    params_old: DenoiserParams | None = None
    opt: AdamWState | None = None
    iteration: int = 0
    rng_states: dict = field(default_factory=dict)
    running_stats: dict = field(default_factory=dict)
    clip_events: int = 0
    config_hash: str = ""
    kind: str = "base"
    world: dict = field(default_factory=dict)

    @classmethod
    def from_state(cls, state: TrainerState, config_hash: str, kind: str, world: dict | None = None) -> "Checkpoint":
        return cls(
            params=state.params.copy(),
            params_old=state.params_old.copy(),
            opt=state.opt.copy(),
            iteration=state.iteration,
            rng_states={k: g.bit_generator.state for k, g in state.rngs.items()},
            running_stats={k: list(v) for k, v in state.running_stats.table.items()},
            clip_events=state.clip_events,
            config_hash=config_hash,
            kind=kind,
            world=dict(world or {}),
        )

    def to_state(self, seed: int = 0) -> TrainerState:
        """Rebuild a TrainerState; missing optimizer or rng state starts fresh from ``seed``."""
        rngs = _rng_streams(seed)
        for name, st in self.rng_states.items():
            rngs[name].bit_generator.state = st
        return TrainerState(
            params=self.params.copy(),
            params_old=(self.params_old or self.params).copy(),
            opt=self.opt.copy() if self.opt is not None else AdamWState.zeros(self.params.size),
            iteration=self.iteration,
            rngs=rngs,
            running_stats=RunningStats({k: list(v) for k, v in self.running_stats.items()}),
            clip_events=self.clip_events,
        )


def _encode(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    arrays: list[tuple[str, np.ndarray]] = [(f"params.{i}", a) for i, a in enumerate(p.arrays())]
    if ckpt.params_old is not None:
        arrays += [(f"params_old.{i}", a) for i, a in enumerate(ckpt.params_old.arrays())]
    if ckpt.opt is not None:
        arrays += [("opt.m", ckpt.opt.m), ("opt.v", ckpt.opt.v)]
    header = {
        "model": {"sample_dim": p.sample_dim, "context_dim": p.context_dim, "hidden": list(p.hidden)},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "opt_t": ckpt.opt.t if ckpt.opt is not None else None,
        "iteration": ckpt.iteration,
        "rng_states": ckpt.rng_states,
        "running_stats": ckpt.running_stats,
        "clip_events": ckpt.clip_events,
        "config_hash": ckpt.config_hash,
        "kind": ckpt.kind,
        "world": ckpt.world,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes), len(payload)) + hbytes + payload


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(_encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    """Load and validate; a config-hash mismatch raises unless ``force``."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated prefix, file ends at byte {len(raw)} (need {_PREFIX.size})")
    magic, version, hlen, plen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at byte 4 (expected {VERSION})")
    hend = _PREFIX.size + hlen
    if len(raw) < hend:
        raise CheckpointError(f"{path}: truncated header, file ends at byte {len(raw)} (header ends at {hend})")
    try:
        header = json.loads(raw[_PREFIX.size : hend].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header at byte {_PREFIX.size}: {e}") from e
    if len(raw) != hend + plen:
        raise CheckpointError(f"{path}: truncated payload, file ends at byte {len(raw)} (expected {hend + plen})")

    arrays, off = {}, hend
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if off + 8 * n > hend + plen:
            raise CheckpointError(f"{path}: array {entry['name']} overruns payload at byte {off}")
        arrays[entry["name"]] = np.frombuffer(raw, "<f8", n, off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != hend + plen:
        raise CheckpointError(f"{path}: {hend + plen - off} unread payload bytes at byte {off}")

    m = header["model"]
    n_layers = len(m["hidden"]) + 1

    def params(prefix):
        if f"{prefix}.0" not in arrays:
            return None
        ws = [arrays[f"{prefix}.{2 * i}"] for i in range(n_layers)]
        bs = [arrays[f"{prefix}.{2 * i + 1}"] for i in range(n_layers)]
        return DenoiserParams(m["sample_dim"], m["context_dim"], tuple(m["hidden"]), ws, bs)

    opt = None
    if "opt.m" in arrays:
        opt = AdamWState(arrays["opt.m"], arrays["opt.v"], int(header["opt_t"]))
    ckpt = Checkpoint(
        params=params("params"),
        params_old=params("params_old"),
        opt=opt,
        iteration=int(header["iteration"]),
        rng_states=header["rng_states"],
        running_stats=header["running_stats"],
        clip_events=int(header["clip_events"]),
        config_hash=header["config_hash"],
        kind=header["kind"],
        world=header["world"],
    )
    if expected_hash is not None and ckpt.config_hash != expected_hash and not force:
        raise ConfigMismatchError(
            f"{path}: checkpoint config hash {ckpt.config_hash} differs from current config {expected_hash}; "
            "pass --force to resume anyway"
        )
    return ckpt
