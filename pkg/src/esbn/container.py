"""Binary "ESIW" container and JSON sidecars.

Every file starts with the 4 magic bytes ``ESIW``, a little-endian u16
format version and a u8 kind tag.  The body layout depends on the kind:

* kinds 1-3 (leadfield-free, leadfield-fixed, generic matrix):
  u32 rows, u32 cols, then rows x cols float64, row-major.
* kind 4 (sample batch) and kind 5 (checkpoint) are laid out by
  :mod:`esbn.simulator` and :mod:`esbn.network` on top of the helpers here.

All integers and floats are little-endian.  Metadata lives next to the
binary file in ``<stem>.meta.json``.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, PayloadLengthError

MAGIC = b"ESIW"
VERSION = 1

KIND_LEADFIELD_FREE = 1
KIND_LEADFIELD_FIXED = 2
KIND_MATRIX = 3
KIND_BATCH = 4
KIND_CHECKPOINT = 5

_HEADER = struct.Struct("<4sHB")
_F64 = np.dtype("<f8")
_U32 = np.dtype("<u4")


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def dumps_json(obj):
    """Deterministic JSON text (sorted keys, trailing newline)."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_container(path, kind, body, meta=None):
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, kind))
        fh.write(body)
    if meta is not None:
        sidecar_path(path).write_text(dumps_json(meta))


def read_container(path, kinds=None):
    """Return ``(kind, body_bytes, meta_or_None)`` after validating the header."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise PayloadLengthError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, kind = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic bytes {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}, expected {VERSION}")
    if kinds is not None and kind not in kinds:
        raise FormatError(f"{path}: container kind {kind} not in {sorted(kinds)}")
    meta = None
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    return kind, raw[_HEADER.size:], meta


class BodyReader:
    """Sequential reader over a container body with strict length checks."""

    def __init__(self, body, label="payload"):
        self.body = body
        self.pos = 0
        self.label = label

    def _take(self, nbytes):
        end = self.pos + nbytes
        if end > len(self.body):
            raise PayloadLengthError(
                f"{self.label}: needs {end} bytes, payload has {len(self.body)}"
            )
        chunk = self.body[self.pos:end]
        self.pos = end
        return chunk

    def u32(self, count=None):
        n = 1 if count is None else count
        arr = np.frombuffer(self._take(4 * n), dtype=_U32).astype(np.int64)
        return int(arr[0]) if count is None else arr

    def f64(self, count=None):
        n = 1 if count is None else count
        arr = np.frombuffer(self._take(8 * n), dtype=_F64).astype(np.float64)
        return float(arr[0]) if count is None else arr

    def matrix(self, rows, cols):
        return self.f64(rows * cols).reshape(rows, cols)

    def finish(self):
        if self.pos != len(self.body):
            raise PayloadLengthError(
                f"{self.label}: {len(self.body) - self.pos} unexpected trailing bytes"
            )


def pack_u32(*values):
    return np.asarray(values, dtype=_U32).tobytes()


def pack_f64(values):
    return np.ascontiguousarray(values, dtype=_F64).tobytes()


def write_matrix(path, array, kind=KIND_MATRIX, meta=None):
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {array.shape}")
    rows, cols = array.shape
    write_container(path, kind, pack_u32(rows, cols) + pack_f64(array), meta)


def read_matrix(path, kinds=(KIND_LEADFIELD_FREE, KIND_LEADFIELD_FIXED, KIND_MATRIX)):
    """Read a kind 1-3 container; returns ``(kind, array, meta)``."""
    kind, body, meta = read_container(path, kinds)
    reader = BodyReader(body, label=str(path))
    rows, cols = reader.u32(), reader.u32()
    expected = 8 + 8 * rows * cols
    if len(body) != expected:
        raise PayloadLengthError(
            f"{path}: header declares {rows}x{cols} ({expected} bytes), payload has {len(body)}"
        )
    array = reader.matrix(rows, cols)
    reader.finish()
    return kind, array, meta
