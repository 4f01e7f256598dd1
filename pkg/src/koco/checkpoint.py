"""Bit-exact model checkpoints.

Layout: an 8-byte magic, a little-endian u32 header length, a UTF-8 JSON
header, then the raw bytes of every tensor in declared order.  The header
records the model config, the step counter, whether optimizer state is
present, a sha256 over all parameter tensor bytes, and a manifest of
(name, shape, dtype) for each stored tensor — parameters first, then any
optimizer tensors.  load(save(x)) returns byte-identical arrays.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumMismatch, VersionMismatch
from .model import ModelConfig, ModelParameters, parameter_names

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"KOCOCKPT"
_FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to resume: parameters, step, optional optimizer state."""

    params: ModelParameters
    step: int = 0
    optimizer_state: dict[str, np.ndarray] | None = None
    extra: dict = field(default_factory=dict)


def _param_checksum(params: ModelParameters) -> str:
    digest = hashlib.sha256()
    for name in parameter_names(params.config):
        tensor = params.tensors[name]
        digest.update(np.ascontiguousarray(tensor).tobytes())
    return digest.hexdigest()


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    params = ckpt.params
    names = parameter_names(params.config)
    missing = [n for n in names if n not in params.tensors]
    if missing:
        raise ValueError(f"parameters missing declared tensors: {missing}")

    entries: list[tuple[str, np.ndarray]] = [(n, params.tensors[n]) for n in names]
    if ckpt.optimizer_state is not None:
        for key in sorted(ckpt.optimizer_state):
            entries.append((f"opt.{key}", ckpt.optimizer_state[key]))

    header = {
        "format": "koco-checkpoint",
        "version": _FORMAT_VERSION,
        "config": params.config.to_dict(),
        "step": int(ckpt.step),
        "has_optimizer_state": ckpt.optimizer_state is not None,
        "param_checksum": _param_checksum(params),
        "extra": ckpt.extra,
        "tensors": [
            {"name": n, "shape": list(t.shape), "dtype": str(t.dtype)}
            for n, t in entries
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, tensor in entries:
            arr = np.ascontiguousarray(tensor)
            if arr.dtype.byteorder == ">":  # store little-endian on any host
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise VersionMismatch(f"{path}: not a checkpoint file (magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format") != "koco-checkpoint":
            raise VersionMismatch(f"{path}: unexpected format {header.get('format')!r}")
        if header.get("version") != _FORMAT_VERSION:
            raise VersionMismatch(
                f"{path}: checkpoint version {header.get('version')} "
                f"(supported: {_FORMAT_VERSION})"
            )
        config = ModelConfig.from_dict(header["config"])
        tensors: dict[str, np.ndarray] = {}
        opt_state: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ChecksumMismatch(f"{path}: truncated tensor {entry['name']}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
            name = entry["name"]
            if name.startswith("opt."):
                opt_state[name[len("opt."):]] = arr
            else:
                tensors[name] = arr

    params = ModelParameters(config=config, tensors=tensors)
    checksum = _param_checksum(params)
    if checksum != header["param_checksum"]:
        raise ChecksumMismatch(
            f"{path}: parameter checksum mismatch "
            f"(stored {header['param_checksum'][:12]}…, computed {checksum[:12]}…)"
        )
    return Checkpoint(
        params=params,
        step=int(header["step"]),
        optimizer_state=opt_state if header["has_optimizer_state"] else None,
        extra=header.get("extra", {}),
    )
