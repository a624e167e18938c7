"""
On-disk formats.

* ``.hflw`` stack container: 64-byte little-endian header followed by
  uint16 frames, frame-major, row-major within a frame.
* Raw arrays: little-endian ``float32`` (``.f32``) or ``complex64``
  (``.c64``) payloads next to a JSON sidecar carrying dtype, shape and
  free-form metadata.
* Masks: binary PGM (8-bit for masks, 16-bit for label images).
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .optics import InterferogramStack, OpticalParams

MAGIC = b"HFLW"
VERSION = 1
HEADER = struct.Struct("<4sHIIIHddd20x")
HEADER_SIZE = 64

_RAW = {".f32": np.dtype("<f4"), ".c64": np.dtype("<c8")}


def stack_file_size(width: int, height: int, frame_count: int) -> int:
    return HEADER_SIZE + width * height * frame_count * 2


def write_stack(path, stack: InterferogramStack) -> Path:
    path = Path(path)
    p = stack.params
    header = HEADER.pack(MAGIC, VERSION, stack.width, stack.height, stack.frame_count, 16,
                         p.frame_rate_hz, p.pixel_pitch_m, p.wavelength_m)
    with open(path, "wb") as fh:
        fh.write(header)
        np.ascontiguousarray(stack.frames, dtype="<u2").tofile(fh)
    return path


def read_stack_header(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"stack file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise DataError(f"{path}: header truncated ({len(raw)} of {HEADER_SIZE} bytes)")
    magic, version, w, h, n, bpp, fs, pitch, lam = HEADER.unpack(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    if bpp != 16:
        raise DataError(f"{path}: bits_per_pixel={bpp}, only 16 is supported")
    if min(w, h, n) <= 0 or not (fs > 0 and pitch > 0 and lam > 0):
        raise DataError(f"{path}: header fields must be positive")
    expected = stack_file_size(w, h, n)
    actual = path.stat().st_size
    if actual != expected:
        raise DataError(f"{path}: expected {expected} bytes for {w}x{h}x{n} frames, found {actual}")
    return dict(width=w, height=h, frame_count=n, bits_per_pixel=bpp, frame_rate_hz=fs,
                pixel_pitch_m=pitch, wavelength_m=lam)


def read_stack(path, params: OpticalParams | None = None, mmap: bool = True) -> InterferogramStack:
    """
    Open a container.  Header acquisition values override the matching
    fields of ``params``; the rest (NA, z, papilla) come from ``params``.
    """
    hdr = read_stack_header(path)
    shape = (hdr["frame_count"], hdr["height"], hdr["width"])
    if mmap:
        frames = np.memmap(path, dtype="<u2", mode="r", offset=HEADER_SIZE, shape=shape)
    else:
        frames = np.fromfile(path, dtype="<u2", offset=HEADER_SIZE).reshape(shape)
    params = (params or OpticalParams()).with_(
        frame_rate_hz=hdr["frame_rate_hz"], pixel_pitch_m=hdr["pixel_pitch_m"],
        wavelength_m=hdr["wavelength_m"])
    return InterferogramStack(frames=frames, params=params)


def _split(path):
    path = Path(path)
    return path.with_suffix(""), path.suffix


def write_array(path, array: np.ndarray, meta: dict | None = None) -> Path:
    """Write ``array`` as ``<path>.f32`` or ``<path>.c64`` (chosen by dtype) plus ``<path>.json``."""
    base, _ = _split(path)
    array = np.asarray(array)
    ext = ".c64" if np.iscomplexobj(array) else ".f32"
    out = base.with_suffix(ext)
    np.ascontiguousarray(array, dtype=_RAW[ext]).tofile(out)
    sidecar = {"dtype": _RAW[ext].str, "shape": list(array.shape), "meta": meta or {}}
    write_json(base.with_suffix(".json"), sidecar)
    return out


def open_array_writer(path, shape, complex_: bool, meta: dict | None = None) -> np.memmap:
    """Memory-mapped raw array for incremental writing; the sidecar is written first."""
    base, _ = _split(path)
    ext = ".c64" if complex_ else ".f32"
    write_json(base.with_suffix(".json"), {"dtype": _RAW[ext].str, "shape": list(shape), "meta": meta or {}})
    return np.memmap(base.with_suffix(ext), dtype=_RAW[ext], mode="w+", shape=tuple(shape))


def read_array(path, mmap: bool = False):
    """Return ``(array, meta)`` for a raw array written by :func:`write_array`."""
    base, _ = _split(path)
    side = base.with_suffix(".json")
    if not side.is_file():
        raise DataError(f"missing sidecar {side}")
    info = read_json(side)
    dtype = np.dtype(info["dtype"])
    ext = {v.str: k for k, v in _RAW.items()}.get(dtype.str)
    if ext is None:
        raise DataError(f"{side}: unsupported dtype {dtype.str}")
    data = base.with_suffix(ext)
    shape = tuple(info["shape"])
    if not data.is_file():
        raise DataError(f"missing array payload {data}")
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = data.stat().st_size
    if actual != expected:
        raise DataError(f"{data}: expected {expected} bytes for shape {shape}, found {actual}")
    if mmap:
        arr = np.memmap(data, dtype=dtype, mode="r", shape=shape)
    else:
        arr = np.fromfile(data, dtype=dtype).reshape(shape)
    return arr, info.get("meta", {})


def write_pgm(path, image: np.ndarray) -> Path:
    """Binary PGM; bool/uint8 -> maxval 255, wider integers -> 16-bit big-endian."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DataError("PGM images are 2-D")
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    if img.min(initial=0) < 0:
        raise DataError("PGM values must be non-negative")
    if img.dtype == np.uint8:
        maxval, data = 255, img
    else:
        if img.max(initial=0) > 65535:
            raise DataError("PGM values above 65535")
        maxval, data = 65535, img.astype(">u2")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"PGM file not found: {path}")
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * np.dtype(dtype).itemsize
    if len(raw) - pos != n:
        raise DataError(f"{path}: expected {n} pixel bytes, found {len(raw) - pos}")
    return np.frombuffer(raw, dtype=dtype, offset=pos).reshape(h, w).astype(
        np.uint8 if maxval < 256 else np.uint16)


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default, allow_nan=True) + "\n")
    os.replace(tmp, path)
    return path


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
