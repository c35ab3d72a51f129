"""Flat binary weight container.

Layout:

    bytes 0..3    magic b"ALDW"
    bytes 4..7    format version, uint32 little-endian (currently 1)
    bytes 8..15   manifest length in bytes, uint64 little-endian
    manifest      UTF-8 text, one entry per line:
                      <name> <dtype> <d0>x<d1>x... <offset>
                  dtype is always f32; offset is the byte position of the
                  entry's payload relative to the end of the manifest
    payload       raw little-endian float32 data, C order, in manifest order

Parameter names are dotted paths without spaces, so the space-separated
fields are unambiguous. Loading is strict: truncated payloads, bad magic,
unknown versions, or malformed manifest lines raise WeightFormatError
with the offending detail.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "WeightFormatError",
    "save_arrays",
    "load_arrays",
    "save_model",
    "load_model",
]

MAGIC = b"ALDW"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4")}


class WeightFormatError(ValueError):
    """The file is not a valid weight container."""


def save_arrays(path, named_arrays):
    """Write (name, array) pairs; arrays are stored as little-endian f32.

    named_arrays may be a dict or an iterable of pairs; order is preserved
    and is the payload order. Values must already be float32 (weights and
    optimizer moments are trained in f32; refusing silent narrowing keeps
    save/load round trips bit-exact).
    """
    items = list(named_arrays.items()) if isinstance(named_arrays, dict) else list(named_arrays)
    manifest_lines = []
    blobs = []
    offset = 0
    for name, arr in items:
        if " " in name or "\n" in name:
            raise WeightFormatError(f"parameter name contains whitespace: {name!r}")
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise WeightFormatError(
                f"{name}: container stores float32, got {arr.dtype} (convert explicitly)"
            )
        dims = "x".join(str(d) for d in arr.shape) if arr.ndim else "1"
        manifest_lines.append(f"{name} f32 {dims} {offset}")
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest = ("\n".join(manifest_lines) + "\n").encode("utf-8") if items else b""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path) -> dict:
    """Read a container back into an insertion-ordered {name: array} dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise WeightFormatError(f"{path}: file too short for header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + mlen:
        raise WeightFormatError(f"{path}: manifest truncated ({len(raw) - 16} of {mlen} bytes)")
    manifest = raw[16 : 16 + mlen].decode("utf-8")
    payload = raw[16 + mlen :]
    out = {}
    for lineno, line in enumerate(manifest.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 4:
            raise WeightFormatError(f"{path}: manifest line {lineno} malformed: {line!r}")
        name, dtype_tag, dims_s, off_s = parts
        if dtype_tag not in _DTYPES:
            raise WeightFormatError(f"{path}: manifest line {lineno}: unknown dtype {dtype_tag!r}")
        if name in out:
            raise WeightFormatError(f"{path}: duplicate parameter {name!r}")
        try:
            shape = tuple(int(d) for d in dims_s.split("x"))
            off = int(off_s)
        except ValueError:
            raise WeightFormatError(f"{path}: manifest line {lineno} malformed: {line!r}")
        dt = _DTYPES[dtype_tag]
        count = int(np.prod(shape)) if shape else 1
        end = off + count * dt.itemsize
        if off < 0 or end > len(payload):
            raise WeightFormatError(
                f"{path}: {name} payload [{off}:{end}] exceeds file ({len(payload)} bytes)"
            )
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=off)
        out[name] = arr.reshape(shape).astype(np.float32, copy=True)
    return out


def save_model(path, model):
    """Serialize a model's parameters under their stable dotted names."""
    save_arrays(path, [(n, t.data) for n, t in model.named_parameters()])


def load_model(path, model):
    """Load weights into an already-constructed model, strictly.

    Every model parameter must be present with a matching shape and no
    extra entries may remain; the first mismatch is named in the error.
    """
    arrays = load_arrays(path)
    model.load_state(arrays)
    return model
