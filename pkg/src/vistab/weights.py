"""Flat tensor container: safetensors-compatible layout, float64 payloads.

File layout: 8 bytes of unsigned little-endian header length N, then N
bytes of UTF-8 JSON mapping tensor name -> {"dtype": "F64", "shape": [...],
"data_offsets": [begin, end]} (offsets relative to the first byte after the
header), then the concatenated little-endian raw data. An optional
"__metadata__" key carries string pairs.

Writes are canonical (names sorted, compact JSON, data in name order), so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import MissingTensorError, WeightFormatError

_HEADER_LEN_BYTES = 8
_DTYPE = "F64"


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray],
                 metadata: dict[str, str] | None = None) -> None:
    """Write named float64 arrays to `path` in canonical order."""
    names = sorted(tensors)
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        raw = arr.astype("<f8", copy=False).tobytes()
        header[name] = {
            "dtype": _DTYPE,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        blobs.append(raw)
        offset += len(raw)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a container; returns (tensors, metadata).

    Raises :class:`WeightFormatError` with a byte offset on malformed
    input and never returns a partially decoded result.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER_LEN_BYTES:
        raise WeightFormatError("file too short for header length field", offset=len(blob))
    (header_len,) = struct.unpack("<Q", blob[:_HEADER_LEN_BYTES])
    header_end = _HEADER_LEN_BYTES + header_len
    if len(blob) < header_end:
        raise WeightFormatError("truncated header", offset=len(blob))
    try:
        header = json.loads(blob[_HEADER_LEN_BYTES:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        pos = getattr(e, "pos", getattr(e, "start", 0))
        raise WeightFormatError(f"header is not valid JSON: {e}", offset=_HEADER_LEN_BYTES + pos)
    if not isinstance(header, dict):
        raise WeightFormatError("header must be a JSON object", offset=_HEADER_LEN_BYTES)

    metadata = {str(k): str(v) for k, v in header.pop("__metadata__", {}).items()}
    data = blob[header_end:]
    tensors: dict[str, np.ndarray] = {}
    for name, info in header.items():
        try:
            dtype = info["dtype"]
            shape = tuple(int(s) for s in info["shape"])
            begin, end = (int(v) for v in info["data_offsets"])
        except (KeyError, TypeError, ValueError) as e:
            raise WeightFormatError(f"bad tensor record for {name!r}: {e}", offset=header_end)
        if dtype != _DTYPE:
            raise WeightFormatError(f"tensor {name!r} has unsupported dtype {dtype!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if end - begin != nbytes:
            raise WeightFormatError(
                f"tensor {name!r} declares {end - begin} bytes for shape {shape}")
        if end > len(data):
            raise WeightFormatError(
                f"tensor {name!r} data extends past end of file", offset=header_end + end)
        arr = np.frombuffer(data[begin:end], dtype="<f8").reshape(shape)
        tensors[name] = np.ascontiguousarray(arr, dtype=np.float64)
    return tensors, metadata


def require(tensors: dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in tensors:
        raise MissingTensorError(f"required tensor {name!r} not found in weight file")
    return tensors[name]
