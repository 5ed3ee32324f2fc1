"""DCSET1 binary checkpoints for synthetic sets, and PGM image-grid dumps.

Layout (all integers little-endian)::

    magic      6 bytes  b"DCSET1"
    version    u16      1
    precision  u8       32 or 64 (dtype of the saved set)
    layout     u8       0 = image (C_in, H, W), 1 = flat vector stored as (1, 1, dim)
    counts     5 x u32  C, IPC, C_in, H, W
    labels     u32 x (C * IPC)
    payload    f64 x (C * IPC * C_in * H * W)
    checksum   u32      CRC32 of the payload bytes
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .data import SyntheticSet

MAGIC = b"DCSET1"
VERSION = 1
_HEADER = struct.Struct("<6sHBB5I")


class CheckpointError(ValueError):
    pass


def dumps(syn: SyntheticSet) -> bytes:
    images = syn.images
    if images.ndim == 2:
        layout, (cin, h, w) = 1, (1, 1, images.shape[1])
    elif images.ndim == 4:
        layout, (cin, h, w) = 0, images.shape[1:]
    else:
        raise CheckpointError(f"cannot store images of shape {images.shape}")
    precision = 32 if images.dtype == np.float32 else 64
    header = _HEADER.pack(MAGIC, VERSION, precision, layout, syn.num_classes, syn.ipc, cin, h, w)
    labels = np.asarray(syn.labels, dtype="<u4").tobytes()
    payload = np.asarray(images, dtype="<f8").tobytes()
    return header + labels + payload + struct.pack("<I", zlib.crc32(payload))


def loads(blob: bytes) -> SyntheticSet:
    if len(blob) < _HEADER.size or blob[:6] != MAGIC:
        raise CheckpointError("not a DCSET1 checkpoint")
    magic, version, precision, layout, c, ipc, cin, h, w = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    n = c * ipc
    off = _HEADER.size
    lab_end = off + 4 * n
    pay_end = lab_end + 8 * n * cin * h * w
    if len(blob) != pay_end + 4:
        raise CheckpointError(f"checkpoint size {len(blob)} does not match header")
    payload = blob[lab_end:pay_end]
    (crc,) = struct.unpack_from("<I", blob, pay_end)
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checksum mismatch: payload is corrupted")
    labels = np.frombuffer(blob[off:lab_end], dtype="<u4").astype(np.int64)
    images = np.frombuffer(payload, dtype="<f8").reshape(n, cin, h, w)
    if layout == 1:
        images = images.reshape(n, w)
    dtype = np.float32 if precision == 32 else np.float64
    return SyntheticSet(images.astype(dtype), labels, ipc, c)


def save(syn: SyntheticSet, path) -> None:
    Path(path).write_bytes(dumps(syn))


def load(path) -> SyntheticSet:
    return loads(Path(path).read_bytes())


def write_pgm_grid(images: np.ndarray, num_classes: int, ipc: int, path) -> None:
    """Binary PGM with one row of ``ipc`` tiles per class (first channel only).

    ``images`` must already be de-normalized; values are clamped to [0, 1].
    """
    if images.ndim != 4:
        raise ValueError("image grid needs [N, C, H, W] images")
    h, w = images.shape[2:]
    grid = np.zeros((num_classes * (h + 1) + 1, ipc * (w + 1) + 1))
    for c in range(num_classes):
        for i in range(ipc):
            tile = images[c * ipc + i, 0]
            grid[1 + c * (h + 1):1 + c * (h + 1) + h, 1 + i * (w + 1):1 + i * (w + 1) + w] = tile
    pix = (np.clip(grid, 0.0, 1.0) * 255).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode())
        fh.write(pix.tobytes())
