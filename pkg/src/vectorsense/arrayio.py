"""Portable array files: one JSON header line followed by raw little-endian float64 blocks.

Layout::

    {"format": "vectorsense-array/1", "arrays": [{"name": ..., "shape": [...]}, ...],
     "sha256": "<hex digest of the binary payload>", ...user metadata...}\\n
    <block 0 bytes><block 1 bytes>...

Blocks are row-major (C order) ``<f8``. The checksum covers the binary payload and
the canonical JSON of the metadata, so a modified header is detected too.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParseError

FORMAT = "vectorsense-array/1"


def _digest(meta: dict, payload: bytes) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())
    h.update(payload)
    return h.hexdigest()


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write named float arrays plus JSON-serialisable ``meta``; returns the checksum."""
    meta = dict(meta or {})
    blocks = []
    spec = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        spec.append({"name": name, "shape": list(a.shape)})
        blocks.append(a.tobytes(order="C"))
    payload = b"".join(blocks)
    digest = _digest(meta, payload)
    header = {"format": FORMAT, "arrays": spec, "meta": meta, "sha256": digest}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    return digest


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict, str]:
    """Read a file written by :func:`write_arrays`.

    Returns ``(arrays, meta, sha256)``. Raises :class:`ParseError` on a malformed
    header and :class:`IntegrityError` on checksum mismatch or truncated payload.
    """
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError("missing header line", line=1, path=path)
    try:
        header = json.loads(raw[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"header is not valid JSON ({exc})", line=1, path=path) from None
    if header.get("format") != FORMAT:
        raise ParseError(f"unsupported format {header.get('format')!r}", line=1, path=path)
    payload = raw[nl + 1:]
    meta = header.get("meta", {})
    if _digest(meta, payload) != header.get("sha256"):
        raise IntegrityError("checksum mismatch (file corrupt or modified)", path=path)
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise IntegrityError(f"array {entry['name']!r} truncated", path=path)
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8,
                                              offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise IntegrityError("trailing bytes after last array", path=path)
    return arrays, meta, header["sha256"]
