"""Writer/reader for the ONIP feature-file format.

Layout: magic "ONIP", u32 version=1, u32 h, u32 w, u32 c (little endian),
then h*w*c little-endian float32 values, row-major with channels fastest.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ONIP"
VERSION = 1


def write_feature_file(fm: np.ndarray, path) -> None:
    fm = np.asarray(fm)
    if fm.ndim != 3:
        raise ValueError(f"feature map must be (h, w, c), got {fm.shape}")
    h, w, c = fm.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIII", VERSION, h, w, c))
        f.write(np.ascontiguousarray(fm, dtype="<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, h, w, c = struct.unpack("<IIII", blob[4:20])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = 20 + 4 * h * w * c
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob[20:], dtype="<f4").reshape(h, w, c).astype(np.float32)
