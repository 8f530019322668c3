"""Dense linear-algebra helpers and the tensor archive format.

Archive layout (all integers little-endian)::

    u64 header_len | header_len bytes of UTF-8 JSON | raw payload

The JSON header maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
where ``data_offsets = [start, end)`` is relative to the first payload byte.
An optional ``"__metadata__"`` entry holds a flat string-to-string map.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np
import scipy.linalg

from .errors import DimensionError, FormatError, SingularityError

DEFAULT_DAMPING = 0.01

DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
}
_TAGS = {v: k for k, v in DTYPES.items()}
METADATA_KEY = "__metadata__"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sym_inverse_damped(h: np.ndarray, damping: float = DEFAULT_DAMPING, name: str = "") -> np.ndarray:
    """Return ``(H + damping * mean(diag H) * I)^-1`` through a Cholesky factorization."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise DimensionError(f"expected a square matrix, got {h.shape}")
    if damping < 0:
        raise ValueError("damping must be nonnegative")
    n = h.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    damped = h + damping * np.mean(np.diag(h)) * np.eye(n)
    try:
        factor = scipy.linalg.cho_factor(damped, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        label = f" for {name}" if name else ""
        raise SingularityError(f"Hessian{label} is not positive definite after damping {damping}") from exc
    inv = scipy.linalg.cho_solve(factor, np.eye(n))
    return 0.5 * (inv + inv.T)


def eigh_topk(s: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` eigenpairs of a symmetric matrix, largest first.

    Each eigenvector's sign is fixed so that its largest-magnitude entry is
    positive, which keeps downstream projections reproducible.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"expected a square matrix, got {s.shape}")
    if k > s.shape[0] or k < 0:
        raise DimensionError(f"k={k} exceeds matrix size {s.shape[0]}")
    vals, vecs = np.linalg.eigh(0.5 * (s + s.T))
    order = np.argsort(-vals, kind="stable")[:k]
    vals = vals[order]
    vecs = vecs[:, order]
    if k:
        pivot = np.argmax(np.abs(vecs), axis=0)
        signs = np.sign(vecs[pivot, np.arange(k)])
        signs[signs == 0] = 1.0
        vecs = vecs * signs
    return vals, vecs


def archive_write(path, tensors, metadata: Mapping[str, str] | None = None) -> None:
    """Write named arrays to ``path``.

    ``tensors`` is a mapping or a sequence of ``(name, array)`` pairs; the
    payload is laid out in iteration order.
    """
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    header: dict = {}
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    chunks = []
    offset = 0
    for name, arr in items:
        if not isinstance(name, str) or name == METADATA_KEY:
            raise FormatError(f"invalid tensor name {name!r}")
        if name in header:
            raise FormatError(f"duplicate tensor name {name!r}")
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _TAGS:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        header[name] = {
            "dtype": _TAGS[dt],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise FormatError(f"duplicate key {key!r} in archive header", offset=8)
        out[key] = value
    return out


def archive_read(path, with_metadata: bool = False):
    """Read an archive written by :func:`archive_write`.

    Returns a dict of arrays (plus the metadata map when ``with_metadata``).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise FormatError("file too short for header length", offset=0)
    (hlen,) = struct.unpack("<Q", data[:8])
    if 8 + hlen > len(data):
        raise FormatError(f"header length {hlen} runs past end of file", offset=8)
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}", offset=8) from exc
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object", offset=8)
    base = 8 + hlen
    payload_len = len(data) - base
    metadata = header.pop(METADATA_KEY, {})
    out = {}
    spans = []
    for name, info in header.items():
        try:
            dt = DTYPES[info["dtype"]]
            shape = tuple(int(s) for s in info["shape"])
            start, end = (int(v) for v in info["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad header entry for {name!r}", offset=8) from exc
        if any(s < 0 for s in shape) or start < 0 or end < start:
            raise FormatError(f"bad shape or offsets for {name!r}", offset=8)
        if end > payload_len:
            raise FormatError(f"tensor {name!r} truncated: needs bytes up to {end}", offset=base + payload_len)
        if end - start != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise FormatError(f"tensor {name!r} byte length does not match its shape", offset=base + start)
        spans.append((start, end, name))
        out[name] = np.frombuffer(data, dtype=dt, count=(end - start) // dt.itemsize, offset=base + start).reshape(shape).copy()
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError(f"tensors {n0!r} and {n1!r} overlap", offset=base + s1)
    if with_metadata:
        return out, dict(metadata)
    return out
