"""Parameter checkpoints: a versioned text header plus a float64 blob.

Layout::

    stepstereo-checkpoint 1
    meta <key> <json value>          # zero or more, keys sorted
    tensor <name> <d0,d1,...|-> <byte offset> <numel>   # one per tensor, in order
    data
    <little-endian float64 payload>

The header is plain ASCII so a checkpoint is inspectable with ``head``; the
payload keeps full float64 precision, making save/load round trips bit-exact.
Tensor order is the module's ``state_dict`` order, so re-serializing a loaded
checkpoint reproduces the original file byte for byte.
"""

import io
import json

import numpy as np
import torch

from .errors import ContractViolation
from .fileio import pack_f64, sha256_file, unpack_f64

MAGIC = "stepstereo-checkpoint"
VERSION = 1


def _format_shape(shape):
    return ",".join(str(d) for d in shape) if shape else "-"


def _parse_shape(text):
    return () if text == "-" else tuple(int(d) for d in text.split(","))


def save_checkpoint(path, tensors, meta=None):
    """Write named float64 arrays (order-preserving) with optional metadata."""
    meta = dict(meta or {})
    header = io.StringIO()
    header.write(f"{MAGIC} {VERSION}\n")
    for key in sorted(meta):
        if " " in key:
            raise ContractViolation(f"meta key {key!r} must not contain spaces")
        header.write(f"meta {key} {json.dumps(meta[key], sort_keys=True)}\n")
    blobs = []
    offset = 0
    for name, value in tensors.items():
        if " " in name:
            raise ContractViolation(f"tensor name {name!r} must not contain spaces")
        arr = np.asarray(value, dtype=np.float64)
        header.write(f"tensor {name} {_format_shape(arr.shape)} {offset} {arr.size}\n")
        blobs.append(pack_f64(np.ascontiguousarray(arr).reshape(-1)))
        offset += arr.size * 8
    header.write("data\n")
    with open(path, "wb") as f:
        f.write(header.getvalue().encode("ascii"))
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors: dict[str, float64 array], meta: dict)."""
    with open(path, "rb") as f:
        first = f.readline().decode("ascii").strip()
        parts = first.split()
        if len(parts) != 2 or parts[0] != MAGIC:
            raise ContractViolation(f"{path}: not a {MAGIC} file")
        if int(parts[1]) != VERSION:
            raise ContractViolation(f"{path}: unsupported version {parts[1]}")
        meta = {}
        entries = []
        while True:
            line = f.readline().decode("ascii")
            if not line:
                raise ContractViolation(f"{path}: missing data marker")
            line = line.rstrip("\n")
            if line == "data":
                break
            kind, rest = line.split(" ", 1)
            if kind == "meta":
                key, value = rest.split(" ", 1)
                meta[key] = json.loads(value)
            elif kind == "tensor":
                name, shape, offset, numel = rest.split(" ")
                entries.append((name, _parse_shape(shape), int(offset), int(numel)))
            else:
                raise ContractViolation(f"{path}: unknown header line {line!r}")
        payload = f.read()
    tensors = {}
    for name, shape, offset, numel in entries:
        chunk = payload[offset : offset + numel * 8]
        tensors[name] = unpack_f64(chunk, numel).reshape(shape)
    return tensors, meta


def save_module(path, module, meta=None):
    """Checkpoint a torch module's state dict (must be float64 throughout)."""
    tensors = {}
    for name, value in module.state_dict().items():
        if value.dtype != torch.float64:
            raise ContractViolation(
                f"parameter {name} has dtype {value.dtype}; checkpoints are float64"
            )
        tensors[name] = value.detach().cpu().numpy()
    save_checkpoint(path, tensors, meta)


def load_module_state(path, module):
    """Load a checkpoint into an existing module; returns the metadata dict."""
    tensors, meta = load_checkpoint(path)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    module.load_state_dict(state)
    return meta


def checkpoint_hash(path):
    """Content hash used to key pseudo-label caches to their generator."""
    return sha256_file(path)
