"""
Binary checkpoint container.

Layout (all integers little-endian):

    magic      8 bytes   b"DPMCKPT\\0"
    version    uint32
    header     uint64 length + UTF-8 JSON (sorted keys)
    payload    named float64 arrays, little-endian, in header order
    checksum   32 bytes  sha256 of everything above

The JSON header lists every array as (name, shape, offset) plus the spec and
model hyperparameters, so a file describes itself.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from src.diffusion.approximators import ParameterVector, ReverseModel, model_from_parameters
from src.diffusion.kernels import DiffusionSpec, Schedule
from src.errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)

logger = logging.getLogger(__name__)

MAGIC = b"DPMCKPT\x00"
FORMAT_VERSION = 1
_DIGEST_SIZE = 32
_PREFIX = struct.Struct("<8sIQ")


@dataclass(frozen=True)
class Checkpoint:
    """A trained (or partially trained) model with its diffusion spec."""

    model: ReverseModel
    step: int = 0
    seed: Optional[int] = None
    factor: Optional[float] = None
    version: int = FORMAT_VERSION

    @property
    def spec(self) -> DiffusionSpec:
        return self.model.spec


def _arrays(checkpoint: Checkpoint) -> Dict[str, np.ndarray]:
    schedule = checkpoint.spec.schedule
    arrays = {"schedule/beta": schedule.beta}
    if schedule.learnable:
        arrays["schedule/u"] = schedule.unconstrained
    for name, value in checkpoint.model.params.unflatten().items():
        arrays[f"model/{name}"] = value
    return arrays


def checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    """Serialize a checkpoint."""
    spec = checkpoint.spec
    entries = []
    chunks = []
    offset = 0
    for name, value in _arrays(checkpoint).items():
        data = np.ascontiguousarray(value, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(value)), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "arrays": entries,
        "payload_bytes": offset,
        "spec": {
            "kind": spec.kind,
            "T": spec.T,
            "dim": spec.dim,
            "equilibrium_rate": spec.equilibrium_rate,
            "learnable": spec.schedule.learnable,
        },
        "model": checkpoint.model.hyperparameters(),
        "step": checkpoint.step,
        "seed": checkpoint.seed,
        "factor": checkpoint.factor,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, checkpoint.version, len(header_bytes)) + header_bytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    """Deserialize a checkpoint, checking magic, version, length and checksum."""
    if len(data) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{source}: file ends inside the fixed header")
    magic, version, header_size = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: format version {version}, this build reads {FORMAT_VERSION}")
    header_end = _PREFIX.size + header_size
    if len(data) < header_end:
        raise CheckpointTruncatedError(f"{source}: file ends inside the JSON header")
    try:
        header = json.loads(data[_PREFIX.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointChecksumError(f"{source}: corrupted header") from exc
    payload_end = header_end + int(header["payload_bytes"])
    if len(data) < payload_end + _DIGEST_SIZE:
        raise CheckpointTruncatedError(f"{source}: file holds {len(data)} bytes, expected {payload_end + _DIGEST_SIZE}")
    if hashlib.sha256(data[:payload_end]).digest() != data[payload_end:payload_end + _DIGEST_SIZE]:
        raise CheckpointChecksumError(f"{source}: checksum mismatch")

    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = header_end + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=start) \
            .astype(np.float64).reshape(entry["shape"])

    meta = header["spec"]
    if meta["learnable"]:
        schedule = Schedule(kind=meta["kind"], beta=arrays["schedule/beta"], learnable=True,
                            unconstrained=arrays["schedule/u"])
    else:
        schedule = Schedule(kind=meta["kind"], beta=arrays["schedule/beta"])
    spec = DiffusionSpec(schedule=schedule, dim=int(meta["dim"]), equilibrium_rate=float(meta["equilibrium_rate"]))
    params = ParameterVector.from_arrays(
        {name[len("model/"):]: value for name, value in arrays.items() if name.startswith("model/")})
    model = model_from_parameters(spec, params, header["model"])
    return Checkpoint(model=model, step=int(header["step"]), seed=header["seed"], factor=header["factor"],
                      version=version)


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    """Write atomically: a temporary sibling is renamed over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(checkpoint))
    os.replace(tmp, path)
    logger.debug("checkpoint written to %s (step %d)", path, checkpoint.step)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), source=str(path))
