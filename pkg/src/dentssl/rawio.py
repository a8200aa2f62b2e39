"""Raw tensor container and manifest IO.

The container is a little-endian binary file with a fixed 44-byte header
(magic, dtype code, rank, four dim slots) followed by the row-major array
payload. Manifests are UTF-8 text, one tab-separated record per line:

    path<TAB>kind<TAB>modality<TAB>dims[,dims...]<TAB>[split_tag]

Blank lines and lines starting with '#' are ignored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ManifestError

MAGIC = b"DENTRAW1"
MAX_RANK = 4

_HEADER = struct.Struct("<8sHH4Q")  # magic, dtype code, rank, dims

_DTYPE_TO_CODE = {
    np.dtype("float32"): 1,
    np.dtype("float64"): 2,
    np.dtype("uint8"): 3,
    np.dtype("int16"): 4,
    np.dtype("int64"): 5,
}
_CODE_TO_DTYPE = {code: dt for dt, code in _DTYPE_TO_CODE.items()}

KIND_IMAGE2D = "image2d"
KIND_VOLUME3D = "volume3d"
_KINDS = (KIND_IMAGE2D, KIND_VOLUME3D)
_KIND_RANK = {KIND_IMAGE2D: 2, KIND_VOLUME3D: 3}


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write `arr` to the raw container at `path`."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= MAX_RANK:
        raise ValueError(f"rank {arr.ndim} outside [1, {MAX_RANK}]")
    dims = list(arr.shape) + [0] * (MAX_RANK - arr.ndim)
    header = _HEADER.pack(MAGIC, _DTYPE_TO_CODE[arr.dtype], arr.ndim, *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_header(path: str | Path) -> tuple[np.dtype, tuple[int, ...]]:
    """Return (dtype, dims) from a container header without loading data."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise ManifestError(f"{path}: truncated container header")
    magic, code, rank, *dims = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ManifestError(f"{path}: bad magic {magic!r}")
    if code not in _CODE_TO_DTYPE:
        raise ManifestError(f"{path}: unknown dtype code {code}")
    if not 1 <= rank <= MAX_RANK:
        raise ManifestError(f"{path}: bad rank {rank}")
    return _CODE_TO_DTYPE[code], tuple(int(d) for d in dims[:rank])


def load_tensor(path: str | Path) -> np.ndarray:
    """Load the full array stored at `path`."""
    dtype, dims = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        data = fh.read()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(data) != expected:
        raise ManifestError(f"{path}: payload size {len(data)} != expected {expected}")
    return np.frombuffer(data, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    kind: str  # image2d | volume3d
    modality: str
    dims: tuple[int, ...]
    split_tag: str | None = None

    def to_line(self) -> str:
        fields = [self.path, self.kind, self.modality, ",".join(str(d) for d in self.dims)]
        if self.split_tag is not None:
            fields.append(self.split_tag)
        return "\t".join(fields)


def parse_record(line: str, lineno: int) -> ManifestRecord:
    fields = line.rstrip("\n").split("\t")
    if len(fields) not in (4, 5):
        raise ManifestError(f"line {lineno}: expected 4 or 5 tab-separated fields, got {len(fields)}")
    path, kind, modality, dims_field = fields[:4]
    split_tag = fields[4] if len(fields) == 5 else None
    if kind not in _KINDS:
        raise ManifestError(f"line {lineno}: unknown kind {kind!r}")
    try:
        dims = tuple(int(d) for d in dims_field.split(","))
    except ValueError as exc:
        raise ManifestError(f"line {lineno}: bad dims field {dims_field!r}") from exc
    if len(dims) != _KIND_RANK[kind] or any(d < 1 for d in dims):
        raise ManifestError(f"line {lineno}: kind {kind} requires {_KIND_RANK[kind]} positive dims, got {dims}")
    return ManifestRecord(path=path, kind=kind, modality=modality, dims=dims, split_tag=split_tag)


def ingest_manifest(path: str | Path, validate_payloads: bool = True) -> list[ManifestRecord]:
    """Parse and validate a manifest file.

    With `validate_payloads` each record's path must resolve (relative to
    the manifest directory) to a raw container whose rank and dims match
    the record. Malformed lines raise ManifestError naming the line.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            rec = parse_record(line, lineno)
            if validate_payloads:
                payload = Path(rec.path)
                if not payload.is_absolute():
                    payload = path.parent / payload
                if not payload.is_file():
                    raise ManifestError(f"line {lineno}: payload not found: {payload}")
                _, dims = read_header(payload)
                if len(dims) != _KIND_RANK[rec.kind]:
                    raise ManifestError(
                        f"line {lineno}: kind {rec.kind} expects rank {_KIND_RANK[rec.kind]}, "
                        f"payload has rank {len(dims)}"
                    )
                if dims != rec.dims:
                    raise ManifestError(f"line {lineno}: dims {rec.dims} do not match payload dims {dims}")
            records.append(rec)
    return records


def write_manifest(records: Sequence[ManifestRecord], path: str | Path) -> None:
    """Single-writer append-style manifest dump."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_line() + "\n")
