"""On-disk formats: raw volumes and checkpoints.

Raw volume::

    VOLRAW1 dtype=float32 shape=1,32,32,32 spacing=1,1,1\\n
    <little-endian float32 voxels, row-major>

Checkpoint::

    VOLDIT-CKPT 1\\n
    <header byte length>\\n
    <JSON header>
    <little-endian float32 parameter blobs in header order>

The header carries the parameter name/shape table and the SHA-256 of the
blob section, which is verified on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ContractError
from .nn import ParameterSet

VOLUME_MAGIC = "VOLRAW1"
CKPT_MAGIC = b"VOLDIT-CKPT"
CKPT_VERSION = 1


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(path, volume: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    v = np.ascontiguousarray(np.asarray(volume), dtype="<f4")
    shape = ",".join(str(s) for s in v.shape)
    sp = ",".join(repr(float(s)) for s in spacing)
    header = f"{VOLUME_MAGIC} dtype=float32 shape={shape} spacing={sp}\n".encode("ascii")
    atomic_write(path, header + v.tobytes())


def read_volume(path) -> tuple[np.ndarray, tuple[float, ...]]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ContractError(f"{path}: missing volume header")
    fields = raw[:nl].decode("ascii").split()
    if not fields or fields[0] != VOLUME_MAGIC:
        raise ContractError(f"{path}: not a raw volume file")
    meta = dict(f.split("=", 1) for f in fields[1:])
    if meta.get("dtype") != "float32":
        raise ContractError(f"{path}: unsupported dtype {meta.get('dtype')}")
    shape = tuple(int(s) for s in meta["shape"].split(","))
    spacing = tuple(float(s) for s in meta["spacing"].split(","))
    data = np.frombuffer(raw[nl + 1 :], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ContractError(f"{path}: voxel count {data.size} does not match shape {shape}")
    return data.reshape(shape).astype(np.float32), spacing


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _blob_bytes(params: ParameterSet) -> bytes:
    return b"".join(np.ascontiguousarray(v.data, dtype="<f4").tobytes() for v in params.values())


def save_checkpoint(path, params: ParameterSet, header: dict) -> str:
    """Write ``params`` with ``header``; returns the SHA-256 of the written file."""
    blob = _blob_bytes(params)
    head = dict(header)
    head["format_version"] = CKPT_VERSION
    head["params"] = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    head["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    hbytes = json.dumps(head, sort_keys=True).encode("utf-8")
    data = CKPT_MAGIC + f" {CKPT_VERSION}\n{len(hbytes)}\n".encode("ascii") + hbytes + blob
    atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, {name: float32 array})``, verifying the blob hash."""
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    if first < 0 or not raw.startswith(CKPT_MAGIC):
        raise ContractError(f"{path}: not a checkpoint file")
    second = raw.find(b"\n", first + 1)
    hlen = int(raw[first + 1 : second])
    start = second + 1
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    blob = raw[start + hlen :]
    if hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise ContractError(f"{path}: parameter blob does not match header hash")
    arrays: dict[str, np.ndarray] = {}
    off = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(blob):
        raise ContractError(f"{path}: blob length {len(blob)} does not match parameter table")
    return header, arrays


def assign_parameters(params: ParameterSet, arrays: dict[str, np.ndarray]) -> None:
    if set(arrays) != set(params):
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        raise ContractError(f"checkpoint parameters mismatch (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, t in params.items():
        if t.shape != arrays[name].shape:
            raise ContractError(f"parameter {name}: shape {arrays[name].shape} vs model {t.shape}")
        t.data = arrays[name].astype(t.dtype).copy()
        t.grad = None
