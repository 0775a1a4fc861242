"""The .apq container: centroid tables plus bitplanes, CRC-checked.

Layout (little-endian):

    magic   4 bytes  b"APQ1"
    n_min   u8
    n_max   u8
    layout  u8       0 = linear, 1 = permuted
    reserved u8      must be 0
    out_channels u32
    in_features  u32 (unpadded)
    padded_cols  u32 (multiple of 1024)
    tables  for k = n_min..n_max: out_channels x 2**k IEEE half floats
    planes  n_max planes, each out_channels rows of padded_cols/8 bytes,
            channel-major, byte-permuted per the layout flag
    crc32   u32 over every preceding byte

Header fields are sanity-checked and the total length recomputed before any
array is materialized, so a corrupted size field fails fast instead of
triggering a huge allocation. The trailing CRC then catches any remaining
byte-level corruption.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .bitplane import (
    LAYOUT_LINEAR,
    LAYOUT_PERMUTED,
    TILE_WEIGHTS,
    BitplaneTensor,
    inverse_permute_layout,
    pack_bitplanes,
    permute_layout,
    unpack_codes,
)
from .errors import ApqFormatError, ParameterError, ShapeError
from .quantizer import MAX_BITS, MIN_BITS, AnyPrecisionLayer

MAGIC = b"APQ1"
_HEADER = struct.Struct("<4sBBBBIII")


def serialize(
    layer: AnyPrecisionLayer,
    tensor: BitplaneTensor | None = None,
    layout: str = LAYOUT_PERMUTED,
) -> bytes:
    """Encode a layer (and optionally its prebuilt bitplanes) to bytes.

    Without ``tensor`` the planes are packed from the layer codes and
    permuted per ``layout``. A supplied tensor must describe the same codes.
    """
    rows, cols = layer.shape
    if rows == 0 or cols == 0:
        raise ShapeError("cannot serialize an empty layer")
    if layout not in (LAYOUT_LINEAR, LAYOUT_PERMUTED):
        raise ParameterError(f"unknown layout {layout!r}")

    if tensor is None:
        tensor = pack_bitplanes(layer.codes, layer.n_max)
        if layout == LAYOUT_PERMUTED:
            tensor = permute_layout(tensor)
    else:
        if (tensor.rows, tensor.cols) != (rows, cols) or tensor.n_max != layer.n_max:
            raise ShapeError("tensor geometry does not match the layer")
        if tensor.layout != layout:
            tensor = (
                permute_layout(tensor)
                if layout == LAYOUT_PERMUTED
                else inverse_permute_layout(tensor)
            )

    parts = [
        _HEADER.pack(
            MAGIC,
            layer.n_min,
            layer.n_max,
            1 if layout == LAYOUT_PERMUTED else 0,
            0,
            rows,
            cols,
            tensor.padded_cols,
        )
    ]
    for k in range(layer.n_min, layer.n_max + 1):
        table = np.ascontiguousarray(layer.centroid_tables[k], dtype="<f2")
        if table.shape != (rows, 1 << k):
            raise ShapeError(f"centroid table for {k}-bit has shape {table.shape}")
        parts.append(table.tobytes())
    parts.append(np.ascontiguousarray(tensor.planes).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _expected_size(n_min, n_max, rows, cols_padded):
    tables = sum(rows * (1 << k) * 2 for k in range(n_min, n_max + 1))
    planes = n_max * rows * (cols_padded // 8)
    return _HEADER.size + tables + planes + 4


def deserialize(data: bytes) -> tuple[AnyPrecisionLayer, BitplaneTensor]:
    """Decode bytes produced by :func:`serialize`; validates before allocating."""
    if len(data) < _HEADER.size + 4:
        raise ApqFormatError(f"stream too short ({len(data)} bytes)", offset=len(data))
    magic, n_min, n_max, layout_flag, reserved, rows, cols, padded = _HEADER.unpack_from(
        data, 0
    )
    if magic != MAGIC:
        raise ApqFormatError(f"bad magic {magic!r}", offset=0)
    if not MIN_BITS <= n_min <= n_max <= MAX_BITS:
        raise ApqFormatError(f"bad bit range [{n_min}, {n_max}]", offset=4)
    if layout_flag not in (0, 1):
        raise ApqFormatError(f"bad layout flag {layout_flag}", offset=6)
    if reserved != 0:
        raise ApqFormatError(f"reserved byte is {reserved}", offset=7)
    if rows == 0 or cols == 0:
        raise ApqFormatError("zero-sized layer", offset=8)
    if padded % TILE_WEIGHTS != 0 or padded < cols:
        raise ApqFormatError(f"bad padded column count {padded}", offset=16)
    expected = _expected_size(n_min, n_max, rows, padded)
    if len(data) != expected:
        raise ApqFormatError(
            f"stream is {len(data)} bytes, header implies {expected}", offset=len(data)
        )
    stored_crc = struct.unpack_from("<I", data, expected - 4)[0]
    actual_crc = zlib.crc32(data[: expected - 4])
    if stored_crc != actual_crc:
        raise ApqFormatError(
            f"crc mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            offset=expected - 4,
        )

    off = _HEADER.size
    tables = {}
    for k in range(n_min, n_max + 1):
        nbytes = rows * (1 << k) * 2
        table = np.frombuffer(data, dtype="<f2", count=rows * (1 << k), offset=off)
        tables[k] = table.reshape(rows, 1 << k).astype(np.float16)
        off += nbytes
    plane_bytes = n_max * rows * (padded // 8)
    planes = (
        np.frombuffer(data, dtype=np.uint8, count=plane_bytes, offset=off)
        .reshape(n_max, rows, padded // 8)
        .copy()
    )
    layout = LAYOUT_PERMUTED if layout_flag else LAYOUT_LINEAR
    tensor = BitplaneTensor(planes, rows, cols, padded, layout)
    codes = unpack_codes(tensor, n_max)
    layer = AnyPrecisionLayer(
        n_min=n_min,
        n_max=n_max,
        codes=codes,
        centroid_tables=tables,
        shape=(rows, cols),
    )
    return layer, tensor


def write_apq(path, layer: AnyPrecisionLayer, tensor=None, layout=LAYOUT_PERMUTED) -> None:
    data = serialize(layer, tensor, layout)
    with open(path, "wb") as f:
        f.write(data)


def read_apq(path) -> tuple[AnyPrecisionLayer, BitplaneTensor]:
    with open(path, "rb") as f:
        return deserialize(f.read())


def layers_equal(a: AnyPrecisionLayer, b: AnyPrecisionLayer) -> bool:
    """Bit-exact equality of the serializable content of two layers."""
    if (a.n_min, a.n_max, a.shape) != (b.n_min, b.n_max, b.shape):
        return False
    if not np.array_equal(a.codes, b.codes):
        return False
    return all(
        np.array_equal(
            a.centroid_tables[k].view(np.uint16), b.centroid_tables[k].view(np.uint16)
        )
        for k in range(a.n_min, a.n_max + 1)
    )
