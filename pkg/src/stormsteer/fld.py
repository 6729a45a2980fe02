"""The ``.fld`` container: JSON header followed by little-endian float64 arrays.

Layout::

    b"FLD1" | uint64 LE header length | UTF-8 JSON header | raw array bytes

The header lists every array with its shape and byte offset into the data
section, plus free-form metadata (grid spec, channel order, architecture...).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .fields import AtmosphericState, GridSpec

MAGIC = b"FLD1"
DTYPE = "<f8"


def write_fld(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=DTYPE))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = {"format": "fld", "version": 1, "dtype": "float64", "byteorder": "little",
              "arrays": entries, "meta": meta or {}}
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw_header)))
        fh.write(raw_header)
        for b in blobs:
            fh.write(b)
    return path


def read_fld(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValidationError(f"{path}: not an .fld file")
    (hlen,) = struct.unpack("<Q", buf[4:12])
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    base = 12 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        chunk = buf[start:start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ValidationError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=DTYPE).reshape(e["shape"]).copy()
    return header["meta"], arrays


def save_state(path: str | Path, state: AtmosphericState, extra: dict | None = None) -> Path:
    meta = {
        "kind": "state",
        "grid": state.spec.to_dict(),
        "channels": [c.label for c in state.spec.channels],
        "time_index": state.time_index,
        **(extra or {}),
    }
    return write_fld(path, {"data": state.data}, meta)


def load_state(path: str | Path) -> AtmosphericState:
    meta, arrays = read_fld(path)
    spec = GridSpec.from_dict(meta["grid"])
    return AtmosphericState(spec, arrays["data"], int(meta["time_index"]))
