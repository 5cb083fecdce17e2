"""Binary checkpoints for router state and adapter bank.

Layout: an 8-byte magic, a little-endian uint32 format version, a
little-endian uint64 header length, a JSON header (dimensions, seeds,
config echo, array manifest), then the raw array payload: float64,
little-endian, row-major, in manifest order. Every value round-trips
bitwise. Writes go to a temp file in the same directory and are renamed
into place, so a crash never leaves a partial file at the final path.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, config_from_dict
from .encoder import AdapterBank, LowRankAdapter
from .router import RlsState

MAGIC = b"ADRTCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    """Base class for unreadable or inconsistent checkpoint files."""


class CheckpointHeaderError(CheckpointError):
    """Missing magic, impossible lengths, or undecodable header."""


class CheckpointVersionError(CheckpointError):
    """Readable header but a format version this code does not speak."""


class CheckpointShapeError(CheckpointError):
    """Manifest and payload disagree about array sizes."""


@dataclass(frozen=True)
class Checkpoint:
    state: RlsState
    bank: AdapterBank
    config: RunConfig
    phase: int  # completed phases; resume starts here


def _le64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _manifest(state: RlsState, bank: AdapterBank):
    entries = [
        ("router/R", state.R),
        ("router/Q", state.Q),
        ("router/W", state.W),
    ]
    adapters_meta = []
    for tid in bank.task_ids:
        adapter = bank.get(tid)
        keys = sorted(adapter.factors)
        adapters_meta.append(
            {"task_id": adapter.task_id, "rank": adapter.rank,
             "keys": [[layer, slot] for layer, slot in keys]}
        )
        for layer, slot in keys:
            B, A = adapter.factors[(layer, slot)]
            entries.append((f"adapter/{tid}/{layer}/{slot}/B", B))
            entries.append((f"adapter/{tid}/{layer}/{slot}/A", A))
    return entries, adapters_meta


def save_checkpoint(
    state: RlsState, bank: AdapterBank, config: RunConfig, path, phase: int = 0
) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    entries, adapters_meta = _manifest(state, bank)
    header = {
        "dims": {"expansion": state.dim, "tasks": state.task_count},
        "lam": state.lam,
        "phase": int(phase),
        "config": config.to_dict(),
        "adapters": adapters_meta,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in entries],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    blob = bytearray(_HEAD.pack(MAGIC, VERSION, len(header_bytes)))
    blob += header_bytes
    for _, a in entries:
        blob += _le64(a)
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_arrays(payload: bytes, manifest):
    arrays = {}
    offset = 0
    for entry in manifest:
        name, shape = entry["name"], entry["shape"]
        if any((not isinstance(s, int)) or s < 0 for s in shape):
            raise CheckpointShapeError(f"array {name!r} has invalid shape {shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise CheckpointShapeError(
                f"payload truncated at array {name!r}: needs {nbytes} bytes "
                f"at offset {offset}, file has {len(payload) - offset} left"
            )
        a = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        arrays[name] = a.astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointShapeError(
            f"{len(payload) - offset} trailing payload bytes beyond the manifest"
        )
    return arrays


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate fully before constructing anything; a bad file
    raises one of the Checkpoint*Error types and yields no partial state."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size:
        raise CheckpointHeaderError(f"file too short for a header: {len(blob)} bytes")
    magic, version, header_len = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointHeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(
            f"format version {version} not supported (expected {VERSION})"
        )
    if _HEAD.size + header_len > len(blob):
        raise CheckpointHeaderError(
            f"declared header length {header_len} exceeds file size"
        )
    try:
        header = json.loads(blob[_HEAD.size:_HEAD.size + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointHeaderError(f"header is not valid JSON: {exc}") from exc
    for key in ("dims", "lam", "phase", "config", "adapters", "arrays"):
        if key not in header:
            raise CheckpointHeaderError(f"header missing field {key!r}")
    arrays = _read_arrays(blob[_HEAD.size + header_len:], header["arrays"])

    E = header["dims"]["expansion"]
    K = header["dims"]["tasks"]
    for name, shape in (("router/R", (E, E)), ("router/Q", (E, K)), ("router/W", (E, K))):
        if name not in arrays:
            raise CheckpointShapeError(f"manifest lacks required array {name!r}")
        if arrays[name].shape != shape:
            raise CheckpointShapeError(
                f"array {name!r} has shape {arrays[name].shape}, expected {shape}"
            )
    state = RlsState(
        R=arrays["router/R"], Q=arrays["router/Q"], W=arrays["router/W"],
        lam=float(header["lam"]),
    )
    bank = AdapterBank()
    for meta in header["adapters"]:
        tid, rank = meta["task_id"], meta["rank"]
        factors = {}
        for layer, slot in meta["keys"]:
            prefix = f"adapter/{tid}/{layer}/{slot}"
            try:
                B, A = arrays[f"{prefix}/B"], arrays[f"{prefix}/A"]
            except KeyError as exc:
                raise CheckpointShapeError(f"manifest lacks {prefix} factors") from exc
            if B.shape[1] != rank or A.shape[0] != rank:
                raise CheckpointShapeError(
                    f"{prefix} factors have rank {B.shape[1]}/{A.shape[0]}, "
                    f"expected {rank}"
                )
            B.setflags(write=False)
            A.setflags(write=False)
            factors[(int(layer), str(slot))] = (B, A)
        bank.add(LowRankAdapter(task_id=int(tid), rank=int(rank), factors=factors))
    config = config_from_dict(header["config"])
    return Checkpoint(state=state, bank=bank, config=config, phase=int(header["phase"]))
