"""Self-describing binary containers for datasets and checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"MDTDATA1" or b"MDTCKPT1"
    header_len   uint64
    header       header_len bytes of UTF-8 JSON (sorted keys, compact separators)
    payload      raw little-endian tensors at the offsets listed in the header

Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from .playgen import Annotation, PlayEpisode

DATA_MAGIC = b"MDTDATA1"
CKPT_MAGIC = b"MDTCKPT1"
FORMAT_VERSION = 1

_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


class ContainerError(Exception):
    pass


class MagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class ShapeError(ContainerError):
    pass


def _dtype_code(arr: np.ndarray) -> str:
    for code, spec in _DTYPES.items():
        if arr.dtype == np.dtype(spec):
            return code
    raise ContainerError(f"unsupported scalar type {arr.dtype}")


def _encode_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def pack(magic: bytes, header: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    """Serialise ``tensors`` (in order) behind ``header``; adds a ``tensors`` manifest."""
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors:
        arr = np.asarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        manifest.append({"name": name, "dtype": _dtype_code(arr), "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    full = dict(header)
    full["tensors"] = manifest
    full["payload_bytes"] = offset
    head = _encode_header(full)
    return magic + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def unpack(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 16:
        raise TruncatedError("file shorter than the fixed preamble")
    if blob[:8] != magic:
        raise MagicError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise TruncatedError("header truncated")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {header.get('version')}")
    payload = memoryview(blob)[16 + hlen:]
    if len(payload) < header["payload_bytes"]:
        raise TruncatedError(f"payload has {len(payload)} of {header['payload_bytes']} bytes")
    tensors = {}
    for item in header["tensors"]:
        start, n = item["offset"], item["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype=_DTYPES[item["dtype"]])
        tensors[item["name"]] = arr.reshape(item["shape"]).copy()
    return header, tensors


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
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


# ------------------------------------------------------------------- dataset
def dataset_to_bytes(episodes: list[PlayEpisode], meta: dict | None = None) -> bytes:
    tensors, eps = [], []
    for n, ep in enumerate(episodes):
        for field in ("states", "actions", "renders"):
            tensors.append((f"ep{n}.{field}", np.asarray(getattr(ep, field), dtype="<f4")))
        eps.append({
            "n_steps": len(ep),
            "n_blocks": ep.n_blocks,
            "annotations": [[a.start, a.end, a.task_id, list(a.tokens)] for a in ep.annotations],
            "intervals": [list(iv) for iv in ep.intervals],
        })
    header = {"version": FORMAT_VERSION, "kind": "play-dataset", "scalar_type": "<f4",
              "episodes": eps, "meta": meta or {}}
    return pack(DATA_MAGIC, header, tensors)


def dataset_from_bytes(blob: bytes) -> tuple[list[PlayEpisode], dict]:
    header, tensors = unpack(blob, DATA_MAGIC)
    episodes = []
    for n, info in enumerate(header["episodes"]):
        episodes.append(PlayEpisode(
            states=tensors[f"ep{n}.states"],
            actions=tensors[f"ep{n}.actions"],
            renders=tensors[f"ep{n}.renders"],
            annotations=[Annotation(s, e, t, list(tok)) for s, e, t, tok in info["annotations"]],
            intervals=[tuple(iv) for iv in info["intervals"]],
            n_blocks=info["n_blocks"],
        ))
    return episodes, header["meta"]


def save_dataset(path, episodes: list[PlayEpisode], meta: dict | None = None) -> None:
    atomic_write(path, dataset_to_bytes(episodes, meta))


def load_dataset(path) -> tuple[list[PlayEpisode], dict]:
    return dataset_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- checkpoint
def checkpoint_to_bytes(tensors: dict[str, np.ndarray], header: dict[str, Any]) -> bytes:
    full = {"version": FORMAT_VERSION, "kind": "checkpoint"}
    full.update(header)
    return pack(CKPT_MAGIC, full, list(tensors.items()))


def save_checkpoint(path, tensors: dict[str, np.ndarray], header: dict[str, Any]) -> None:
    atomic_write(path, checkpoint_to_bytes(tensors, header))


def load_checkpoint(path, expected_shapes: dict[str, tuple] | None = None):
    """Return (header, tensors). With ``expected_shapes`` every listed tensor must match."""
    header, tensors = unpack(Path(path).read_bytes(), CKPT_MAGIC)
    if expected_shapes is not None:
        check_shapes(tensors, expected_shapes)
    return header, tensors


def check_shapes(tensors: dict[str, np.ndarray], expected: dict[str, tuple]) -> None:
    for name, shape in expected.items():
        if name not in tensors:
            raise ShapeError(f"checkpoint lacks tensor {name}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise ShapeError(f"tensor {name} has shape {tuple(tensors[name].shape)}, model expects {tuple(shape)}")
