"""Reader/writer for a strict NRRD subset.

Supported: detached headers are not; dimension 3; types uint8, int16,
float32; little endian; raw or gzip encoding; geometry via ``spacings`` or a
diagonal ``space directions`` matrix.  Payload order is x fastest (NRRD's
sizes[0]-fastest convention), handled through the shared linearization
helpers.  uint8 payloads containing only {0, 1} load as masks; everything
else loads as a float32 volume.
"""

from __future__ import annotations

import gzip
import zlib
from pathlib import Path

import numpy as np

from .errors import ParseError
from .grids import Mask, Volume, from_linear, to_linear

MAGIC_PREFIX = "NRRD000"

_TYPE_ALIASES = {
    "uchar": np.uint8, "unsigned char": np.uint8, "uint8": np.uint8, "uint8_t": np.uint8,
    "short": np.int16, "short int": np.int16, "signed short": np.int16,
    "int16": np.int16, "int16_t": np.int16,
    "float": np.float32, "float32": np.float32,
}

_KNOWN_FIELDS = {
    "type", "dimension", "sizes", "encoding", "endian", "spacings",
    "space directions", "space origin", "space", "kinds", "content",
}


def _parse_header(lines: list[str]) -> dict:
    fields = {}
    for lineno, line in enumerate(lines, start=2):  # line 1 is the magic
        if line.startswith("#") or not line.strip():
            continue
        if ":" not in line:
            raise ParseError(f"line {lineno}: not a 'field: value' line: {line!r}")
        key, value = line.split(":", 1)
        key = key.strip().lower()
        if key not in _KNOWN_FIELDS:
            raise ParseError(f"line {lineno}: unsupported field {key!r}")
        fields[key] = value.strip()
    return fields


def _parse_spacing(fields: dict) -> tuple[float, float, float]:
    if "spacings" in fields:
        parts = fields["spacings"].split()
        if len(parts) != 3:
            raise ParseError(f"field 'spacings': expected 3 values, got {fields['spacings']!r}")
        spacing = tuple(float(p) for p in parts)
    elif "space directions" in fields:
        text = fields["space directions"].replace("(", " ").replace(")", " ").replace(",", " ")
        vals = text.split()
        if len(vals) != 9:
            raise ParseError(
                f"field 'space directions': expected 3 vectors, got {fields['space directions']!r}"
            )
        try:
            mat = np.array([float(v) for v in vals]).reshape(3, 3)
        except ValueError:
            raise ParseError(
                f"field 'space directions': not numeric: {fields['space directions']!r}"
            ) from None
        off = mat - np.diag(np.diag(mat))
        if np.any(off != 0):
            raise ParseError("field 'space directions': only diagonal matrices are supported")
        spacing = tuple(np.diag(mat))
    else:
        spacing = (1.0, 1.0, 1.0)
    if any(s <= 0 for s in spacing):
        raise ParseError(f"voxel spacing must be positive, got {spacing}")
    return spacing


def read_volume(path) -> Volume | Mask:
    """Parse an NRRD file into a Volume (float32) or a Mask (binary uint8)."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0 or not raw[:nl].decode("ascii", "replace").startswith(MAGIC_PREFIX):
        raise ParseError(f"{path}: bad magic; expected an NRRD header")
    version = raw[:nl].decode("ascii", "replace").strip()
    if version[len(MAGIC_PREFIX):] not in tuple("12345"):
        raise ParseError(f"{path}: unsupported NRRD version {version!r}")
    sep = raw.find(b"\n\n", nl)
    if sep < 0:
        raise ParseError(f"{path}: missing blank line after header")
    header = raw[nl + 1:sep].decode("ascii", "replace")
    payload = raw[sep + 2:]
    fields = _parse_header(header.splitlines())

    for required in ("type", "dimension", "sizes", "encoding"):
        if required not in fields:
            raise ParseError(f"{path}: missing required field {required!r}")
    if fields["dimension"] != "3":
        raise ParseError(f"field 'dimension': only 3 is supported, got {fields['dimension']!r}")
    tname = fields["type"].lower()
    if tname not in _TYPE_ALIASES:
        raise ParseError(f"field 'type': unsupported type {fields['type']!r}")
    dtype = np.dtype(_TYPE_ALIASES[tname]).newbyteorder("<")
    endian = fields.get("endian", "little").lower()
    if endian != "little":
        raise ParseError(f"field 'endian': only little endian is supported, got {endian!r}")
    try:
        sizes = tuple(int(s) for s in fields["sizes"].split())
    except ValueError:
        raise ParseError(f"field 'sizes': not integers: {fields['sizes']!r}") from None
    if len(sizes) != 3 or any(s < 1 for s in sizes):
        raise ParseError(f"field 'sizes': expected 3 positive integers, got {sizes}")
    spacing = _parse_spacing(fields)

    expected = int(np.prod(sizes)) * dtype.itemsize
    encoding = fields["encoding"].lower()
    if encoding == "raw":
        pass
    elif encoding in ("gzip", "gz"):
        decomp = zlib.decompressobj(wbits=31)
        payload = decomp.decompress(payload, expected)
        if decomp.decompress(b"", 1):
            raise ParseError(f"{path}: gzip payload longer than sizes imply")
    else:
        raise ParseError(f"field 'encoding': unsupported encoding {fields['encoding']!r}")
    if len(payload) != expected:
        raise ParseError(
            f"{path}: payload is {len(payload)} bytes, sizes {sizes} imply {expected}"
        )

    flat = np.frombuffer(payload, dtype=dtype)
    data = from_linear(flat, sizes)
    if dtype.base == np.uint8:
        values = np.unique(data)
        if np.isin(values, (0, 1)).all():
            return Mask(data.astype(bool), spacing)
        return Volume(data.astype(np.float32), spacing)
    return Volume(data.astype(np.float32), spacing)


def write_volume(v: Volume | Mask, path, encoding: str = "raw") -> None:
    """Write a volume (float32) or mask (uint8) with deterministic bytes."""
    if encoding not in ("raw", "gzip"):
        raise ValueError(f"encoding must be 'raw' or 'gzip', got {encoding!r}")
    if isinstance(v, Mask):
        data = v.data.astype(np.uint8)
        tname = "uint8"
    else:
        data = v.data.astype(np.float32, copy=False)
        tname = "float32"
    payload = to_linear(data).astype(data.dtype.newbyteorder("<"), copy=False).tobytes()
    if encoding == "gzip":
        payload = gzip.compress(payload, mtime=0)
    header = (
        "NRRD0004\n"
        f"type: {tname}\n"
        "dimension: 3\n"
        f"sizes: {v.dims[0]} {v.dims[1]} {v.dims[2]}\n"
        f"spacings: {v.spacing[0]:.17g} {v.spacing[1]:.17g} {v.spacing[2]:.17g}\n"
        "endian: little\n"
        f"encoding: {encoding}\n"
        "\n"
    )
    Path(path).write_bytes(header.encode("ascii") + payload)
