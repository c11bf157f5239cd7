"""Byte-reproducible archives for atlases, model bundles and checkpoints.

Every archive is a zip file holding a ``header.json`` entry (format tag plus
free-form metadata) and one ``.npy`` entry per named array. Timestamps and
entry order are fixed so that identical content always yields identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import FormatError

_EPOCH = (1980, 1, 1, 0, 0, 0)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def hash_arrays(arrays: Mapping[str, np.ndarray], meta: Any = None) -> str:
    """Content hash over named arrays (name, dtype, shape, raw bytes) and metadata."""
    h = hashlib.sha256()
    if meta is not None:
        h.update(canonical_json(meta).encode())
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], order="C")
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_archive(path, tag: str, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> str:
    """Write an archive and return the sha256 of the written bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        header = {"format": tag, "meta": dict(meta), "arrays": sorted(arrays)}
        _write_entry(zf, "header.json", canonical_json(header).encode())
        for name in sorted(arrays):
            arr_buf = io.BytesIO()
            np.lib.format.write_array(arr_buf, np.asarray(arrays[name], order="C"), allow_pickle=False)
            _write_entry(zf, f"{name}.npy", arr_buf.getvalue())
    data = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return sha256_bytes(data)


def load_archive(path, tag: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with zipfile.ZipFile(Path(path)) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != tag:
            raise FormatError(f"{path}: expected format {tag!r}, found {header.get('format')!r}")
        arrays = {}
        for name in header["arrays"]:
            with zf.open(f"{name}.npy") as fh:
                arrays[name] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    return arrays, header["meta"]
