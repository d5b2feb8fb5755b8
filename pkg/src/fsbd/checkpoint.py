"""Binary persistence: parameter checkpoints, tensor blobs, bit-packed masks.

Checkpoint layout: magic "FSBD", version u32, entry count u32, then one record
per parameter tensor (layer u32, kind u32 [0=weight, 1=bias], offset u32,
length u32, ndim u32, dims u32...), then the flat float32 values. All integers
and floats little-endian. The same container stores arbitrary tensor lists
(trigger images), with record index standing in for the layer id.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import FormatError, LayoutMismatchError
from .nn import ParamSlot, ParamVector

MAGIC = b"FSBD"
MASK_MAGIC = b"FSBM"
VERSION = 1

_KIND_CODES = {"weight": 0, "bias": 1, "tensor": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def _pack_records(records) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for layer, kind, offset, shape in records:
        out.append(struct.pack("<IIIII", layer, _KIND_CODES[kind], offset, int(np.prod(shape)), len(shape)))
        out.append(struct.pack(f"<{len(shape)}I", *shape))
    return b"".join(out)


def _unpack_records(buf: bytes, path: str):
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header at offset {len(buf)}")
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at offset 0")
    version, count = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    records = []
    pos = 12
    for _ in range(count):
        if len(buf) < pos + 20:
            raise FormatError(f"{path}: truncated record at offset {pos}")
        layer, kind, offset, length, ndim = struct.unpack("<IIIII", buf[pos:pos + 20])
        pos += 20
        if len(buf) < pos + 4 * ndim:
            raise FormatError(f"{path}: truncated dims at offset {pos}")
        shape = struct.unpack(f"<{ndim}I", buf[pos:pos + 4 * ndim])
        pos += 4 * ndim
        if int(np.prod(shape)) != length:
            raise FormatError(f"{path}: record at offset {pos}: shape {shape} != length {length}")
        if kind not in _KIND_NAMES:
            raise FormatError(f"{path}: unknown record kind {kind} at offset {pos}")
        records.append((layer, _KIND_NAMES[kind], offset, shape))
    return records, pos


def layout_hash(layout: tuple[ParamSlot, ...]) -> str:
    """Hex digest identifying a parameter layout; persisted next to masks and checked on load."""
    header = _pack_records([(s.layer, s.name, s.offset, s.shape) for s in layout])
    return hashlib.sha256(header).hexdigest()


def save_params(path, vec: ParamVector) -> None:
    header = _pack_records([(s.layer, s.name, s.offset, s.shape) for s in vec.layout])
    with open(path, "wb") as f:
        f.write(header)
        f.write(vec.values.astype("<f4").tobytes())


def load_params(path, layout: tuple[ParamSlot, ...] | None = None) -> ParamVector:
    """Read a checkpoint; when a layout is supplied it must match exactly."""
    with open(path, "rb") as f:
        buf = f.read()
    records, pos = _unpack_records(buf, str(path))
    slots = tuple(ParamSlot(layer, name, offset, tuple(int(d) for d in shape))
                  for layer, name, offset, shape in records)
    total = sum(s.length for s in slots)
    available = (len(buf) - pos) // 4
    if available < total:
        raise FormatError(f"{path}: truncated values at offset {pos + 4 * available}")
    values = np.frombuffer(buf, dtype="<f4", count=total, offset=pos)
    if layout is not None and slots != tuple(layout):
        raise LayoutMismatchError(
            f"{path}: checkpoint layout hash {layout_hash(slots)[:12]} does not match "
            f"expected {layout_hash(tuple(layout))[:12]}")
    return ParamVector(values.astype(np.float32), slots)


def save_tensors(path, arrays: list[np.ndarray]) -> None:
    records = []
    offset = 0
    for i, a in enumerate(arrays):
        records.append((i, "tensor", offset, tuple(a.shape)))
        offset += a.size
    with open(path, "wb") as f:
        f.write(_pack_records(records))
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_tensors(path) -> list[np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    records, pos = _unpack_records(buf, str(path))
    total = sum(int(np.prod(shape)) for _, _, _, shape in records)
    available = (len(buf) - pos) // 4
    if available < total:
        raise FormatError(f"{path}: truncated values at offset {pos + 4 * available}")
    values = np.frombuffer(buf, dtype="<f4", count=total, offset=pos)
    out = []
    for _, _, offset, shape in records:
        length = int(np.prod(shape))
        out.append(values[offset:offset + length].reshape(shape).astype(np.float32))
    return out


def save_mask(path, bits: np.ndarray, vec_layout: tuple[ParamSlot, ...]) -> None:
    digest = bytes.fromhex(layout_hash(vec_layout))
    with open(path, "wb") as f:
        f.write(MASK_MAGIC)
        f.write(struct.pack("<II", VERSION, bits.size))
        f.write(digest)
        f.write(np.packbits(bits.astype(bool)).tobytes())


def load_mask(path, vec_layout: tuple[ParamSlot, ...]) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 44 or buf[:4] != MASK_MAGIC:
        raise FormatError(f"{path}: bad mask header at offset 0")
    version, size = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    stored = buf[12:44]
    if stored != bytes.fromhex(layout_hash(vec_layout)):
        raise LayoutMismatchError(f"{path}: mask layout hash does not match current layout")
    packed = np.frombuffer(buf, dtype=np.uint8, offset=44)
    if packed.size * 8 < size:
        raise FormatError(f"{path}: truncated mask bits at offset {44 + packed.size}")
    return np.unpackbits(packed, count=size).astype(bool)
