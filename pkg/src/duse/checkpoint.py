"""Single-file checkpoint container.

Layout: an 8-byte magic, a little-endian uint64 header length, a JSON
header, then the concatenated raw little-endian float64 tensor payloads in
header order. The header names every tensor with its group, shape, offset,
and byte count, so a file is loadable without external context and any
truncation is detectable.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .errors import CheckpointVersionError, CorruptCheckpointError
from .signal_pipeline import StftConfig

MAGIC = b"DUSECKPT"
FORMAT_VERSION = 1

ROLE_RVAE = "rvae_pretrained"
ROLE_ND = "nd_trained"
_ROLES = (ROLE_RVAE, ROLE_ND)


@dataclass
class Checkpoint:
    """Parameter groups plus the configuration needed to rebuild the models."""

    role: str
    params: dict[str, dict[str, np.ndarray]]  # group -> tensor name -> float64 array
    stft: StftConfig
    train: TrainConfig
    variant: str | None = None
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"unknown checkpoint role {self.role!r}; expected {_ROLES}")
        if self.role == ROLE_ND and self.variant is None:
            raise ValueError("nd_trained checkpoint requires a noise-model variant tag")


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Atomically write a checkpoint (temp file + rename)."""
    path = os.fspath(path)
    tensors = []
    payload = []
    offset = 0
    for group in sorted(ckpt.params):
        for name in ckpt.params[group]:
            arr = np.ascontiguousarray(ckpt.params[group][name], dtype="<f8")
            raw = arr.tobytes()
            tensors.append(
                {
                    "group": group,
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": "<f8",
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            payload.append(raw)
            offset += len(raw)
    header = {
        "format_version": ckpt.format_version,
        "role": ckpt.role,
        "variant": ckpt.variant,
        "stft": ckpt.stft.to_dict(),
        "train": ckpt.train.to_dict(),
        "meta": ckpt.meta,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".ckpt.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for raw in payload:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Read and validate a checkpoint; refuses unknown format versions."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC))
    header_start = len(MAGIC) + 8
    if len(blob) < header_start + header_len:
        raise CorruptCheckpointError(f"{path}: corrupt checkpoint (truncated header)")
    try:
        header = json.loads(blob[header_start : header_start + header_len])
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"{path}: corrupt checkpoint header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(found=version, expected=FORMAT_VERSION)

    payload_start = header_start + header_len
    params: dict[str, dict[str, np.ndarray]] = {}
    for t in header["tensors"]:
        start = payload_start + t["offset"]
        end = start + t["nbytes"]
        if end > len(blob):
            raise CorruptCheckpointError(
                f"{path}: corrupt checkpoint (truncated tensor {t['group']}/{t['name']})"
            )
        arr = np.frombuffer(blob[start:end], dtype="<f8").reshape(t["shape"]).copy()
        params.setdefault(t["group"], {})[t["name"]] = arr
    return Checkpoint(
        role=header["role"],
        params=params,
        stft=StftConfig.from_dict(header["stft"]),
        train=TrainConfig.from_dict(header["train"]),
        variant=header.get("variant"),
        meta=header.get("meta", {}),
        format_version=version,
    )
