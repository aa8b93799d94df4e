"""Binary containers: MILF feature files and parameter checkpoints.

Feature file layout (little-endian)::

    b"MILF" | u32 version=1 | u32 n_instances | u32 dim | float32[n_instances * dim]

Checkpoint layout (little-endian)::

    b"MILC" | u32 version=1 | u32 header_len | header JSON (utf-8) | float64 blobs

The checkpoint header carries free-form architecture metadata plus an
ordered list of ``{"section", "name", "shape"}`` records, one per blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"MILF"
CHECKPOINT_MAGIC = b"MILC"
VERSION = 1
_HEAD = struct.Struct("<4sIII")
_CKPT_HEAD = struct.Struct("<4sII")


class FormatError(ValueError):
    """A file failed validation; ``path`` and byte ``offset`` locate the fault."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path} @ byte {offset}: {message}")


def write_features(path, features: np.ndarray) -> None:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {arr.shape}")
    n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(FEATURE_MAGIC, VERSION, n, d))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_features(path) -> np.ndarray:
    """Read a MILF file into a float64 ``(n_instances, dim)`` array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise FormatError(path, len(raw), f"truncated header ({len(raw)} of {_HEAD.size} bytes)")
    magic, version, n, d = _HEAD.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    if n < 1 or d < 1:
        raise FormatError(path, 8, f"empty payload declared (n={n}, dim={d})")
    expected = n * d * 4
    body = raw[_HEAD.size:]
    if len(body) != expected:
        raise FormatError(path, _HEAD.size + min(len(body), expected),
                          f"declared {n}x{d} float32 ({expected} bytes), found {len(body)} bytes")
    arr = np.frombuffer(body, dtype="<f4").reshape(n, d)
    bad = np.flatnonzero(~np.isfinite(arr.reshape(-1)))
    if bad.size:
        raise FormatError(path, _HEAD.size + 4 * int(bad[0]), "non-finite feature value")
    return arr.astype(np.float64)


def write_checkpoint(path, arch: dict, sections: dict[str, dict[str, np.ndarray]]) -> None:
    records, blobs = [], []
    for section, tensors in sections.items():
        for name, value in tensors.items():
            a = np.asarray(value, dtype="<f8")
            records.append({"section": section, "name": name, "shape": list(a.shape)})
            blobs.append(a.tobytes(order="C"))
    header = json.dumps({"arch": arch, "tensors": records}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CHECKPOINT_MAGIC, VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise FormatError(path, len(raw), "truncated checkpoint header")
    magic, version, hlen = _CKPT_HEAD.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    offset = _CKPT_HEAD.size
    try:
        header = json.loads(raw[offset:offset + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(path, offset, f"unreadable header: {exc}") from None
    offset += hlen
    sections: dict[str, dict[str, np.ndarray]] = {}
    for rec in header["tensors"]:
        count = int(np.prod(rec["shape"], dtype=np.int64))
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise FormatError(path, offset, f"blob {rec['section']}/{rec['name']} truncated")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(rec["shape"])
        sections.setdefault(rec["section"], {})[rec["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(path, offset, f"{len(raw) - offset} trailing bytes")
    return header["arch"], sections
