"""Self-describing checkpoint container

Layout:
    magic       8 bytes   b"SSLCKPT\\0"
    version     uint32 LE
    header_len  uint64 LE
    header      UTF-8 JSON (sorted keys): config snapshot, step, metadata,
                payload sha256 and the parameter table
                [{name, dtype, shape, offset, nbytes}, ...]
    payload     concatenated tensors, little-endian ("<f4" parameters and
                float buffers, "<i8" integer buffers)
"""
import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np
import torch

from app.errors import CheckpointVersionError, CorruptCheckpointError
from app.models import ModelBundle, ModelConfig
from app.utils import seeded

logger = logging.getLogger(__name__)

MAGIC = b"SSLCKPT\x00"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")

_DTYPES = {
    torch.float32: "<f4",
    torch.int64: "<i8",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def _to_bytes(tensor: torch.Tensor) -> tuple[str, bytes]:
    tensor = tensor.detach().cpu().contiguous()
    if tensor.dtype not in _DTYPES:
        tensor = tensor.float()
    dtype = _DTYPES[tensor.dtype]
    return dtype, tensor.numpy().astype(dtype, copy=False).tobytes()


def save_checkpoint(bundle: ModelBundle, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    table = []
    chunks = []
    offset = 0
    state = bundle.state_dict()
    for name in sorted(state):
        dtype, blob = _to_bytes(state[name])
        table.append({
            "name": name,
            "dtype": dtype,
            "shape": list(state[name].shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)

    header = json.dumps({
        "config": bundle.config.model_dump(mode="json"),
        "step": int(bundle.step),
        "metadata": bundle.metadata,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": table,
    }, sort_keys=True).encode("utf-8")

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
    tmp.replace(path)
    logger.debug(f"Checkpoint saved: {path} ({len(table)} tensors, step {bundle.step})")
    return path


def load_checkpoint(path: Union[str, Path]) -> ModelBundle:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise CorruptCheckpointError(f"{path.name}: truncated preamble")

    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path.name}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path.name}: format version {version}, expected {FORMAT_VERSION}")

    start = _PREAMBLE.size
    if len(raw) < start + header_len:
        raise CorruptCheckpointError(f"{path.name}: truncated header")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path.name}: unreadable header ({e})")

    payload = raw[start + header_len:]
    expected = sum(entry["nbytes"] for entry in header["tensors"])
    if len(payload) != expected:
        raise CorruptCheckpointError(f"{path.name}: payload is {len(payload)} bytes, expected {expected}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpointError(f"{path.name}: payload checksum mismatch")

    # constructors draw from the shared RNG; weights are overwritten below
    with seeded(0):
        bundle = ModelBundle(ModelConfig.model_validate(header["config"]))
    state = {}
    for entry in header["tensors"]:
        blob = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(blob, dtype=entry["dtype"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(array.copy()).to(_TORCH_DTYPES[entry["dtype"]])
    bundle.load_state_dict(state, strict=True)

    bundle.step = int(header["step"])
    bundle.metadata = dict(header["metadata"])
    return bundle
