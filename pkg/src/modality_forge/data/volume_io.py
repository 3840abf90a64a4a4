"""Binary ``MVOL1`` volume format.

Layout: the 6 magic bytes ``b"MVOL1\\0"``, five little-endian u32 fields
``[ndim, d0, d1, d2, dtype]`` and a row-major payload. Unused trailing
dimensions are written as 1. Only dtype code 0 (float32) is defined.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from modality_forge.data.types import ModalityCode, SliceImage

MAGIC = b"MVOL1\x00"
HEADER = struct.Struct("<5I")
DTYPE_CODES = {0: np.dtype("<f4")}


class VolumeFormatError(ValueError):
    """Raised for malformed MVOL1 files."""


def write_array(array, path) -> None:
    arr = np.asarray(array)
    if not 1 <= arr.ndim <= 3:
        raise ValueError(f"MVOL1 holds 1-3 dimensional arrays, got ndim={arr.ndim}")
    dims = list(arr.shape) + [1] * (3 - arr.ndim)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(HEADER.pack(arr.ndim, *dims, 0))
        fh.write(payload)
    os.replace(tmp, path)


def read_array(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    if len(data) < len(MAGIC) + HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    ndim, d0, d1, d2, code = HEADER.unpack_from(data, len(MAGIC))
    if not 1 <= ndim <= 3:
        raise VolumeFormatError(f"{path}: invalid ndim {ndim}")
    dims = (d0, d1, d2)
    if any(d != 1 for d in dims[ndim:]):
        raise VolumeFormatError(f"{path}: dimension mismatch, unused dims {dims[ndim:]} must be 1")
    if code not in DTYPE_CODES:
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    shape = dims[:ndim]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = data[len(MAGIC) + HEADER.size:]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float32)


def save_volume(images, path) -> None:
    """Write a sequence of slices (or a single 2D/3D array) as one volume."""
    if isinstance(images, np.ndarray):
        write_array(images, path)
        return
    stack = np.stack([np.asarray(im.pixels if isinstance(im, SliceImage) else im)
                      for im in images])
    write_array(stack, path)


def load_volume(path, modality: ModalityCode | None = None,
                subject_id: str = "") -> list[SliceImage]:
    """Read a volume as a list of slices, ``slice_index`` 0..D-1."""
    arr = read_array(path)
    if arr.ndim == 1:
        raise VolumeFormatError(f"{path}: 1D array is not an image volume")
    if arr.ndim == 2:
        arr = arr[None]
    modality = modality or ModalityCode(0, 1)
    return [SliceImage(arr[d], modality, subject_id, d) for d in range(arr.shape[0])]
