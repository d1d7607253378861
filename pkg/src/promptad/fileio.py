"""Binary tensor files.

Two layouts share one framing (magic "ONIP", little-endian u32 header
fields, raw little-endian float32 payloads):

* version 1 — a single feature map: ``h w c`` then ``h*w*c`` floats,
  row-major with the channel index fastest.
* version 2 — a named-tensor container used for checkpoints: a tensor
  count, then per entry a length-prefixed UTF-8 name, a rank, ``rank``
  dimension sizes, and the payload.

Every parse failure reports the byte offset at which it occurred.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"ONIP"
FEATURE_VERSION = 1
CONTAINER_VERSION = 2


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def fail(self, why: str):
        raise FormatError(f"{self.path}: {why} at byte {self.pos}")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            self.fail(f"truncated (needed {n} bytes, had {len(self.blob) - self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def floats(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4", count=count)


def _check_header(r: _Reader, expect_version: int) -> None:
    if r.take(4) != MAGIC:
        r.pos = 0
        r.fail("bad magic")
    version = r.u32()
    if version != expect_version:
        r.pos -= 4
        r.fail(f"unsupported version {version} (expected {expect_version})")


def save_feature_file(fm: np.ndarray, path) -> None:
    """Write an (h, w, c) float map as a version-1 feature file."""
    fm = np.asarray(fm)
    if fm.ndim != 3:
        raise FormatError(f"feature map must be rank 3, got shape {fm.shape}")
    h, w, c = fm.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIII", FEATURE_VERSION, h, w, c))
        f.write(np.ascontiguousarray(fm, dtype="<f4").tobytes())


def load_feature_file(path) -> np.ndarray:
    """Read a version-1 feature file back as a float32 (h, w, c) array."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    _check_header(r, FEATURE_VERSION)
    h, w, c = r.u32(), r.u32(), r.u32()
    data = r.floats(h * w * c)
    if r.pos != len(r.blob):
        r.fail(f"trailing {len(r.blob) - r.pos} bytes")
    return data.reshape(h, w, c).astype(np.float32)


def save_container(tensors: dict[str, np.ndarray], path) -> None:
    """Write named float arrays as a version-2 container."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", CONTAINER_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_container(path) -> dict[str, np.ndarray]:
    """Read a version-2 container back into an ordered name -> array dict."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    _check_header(r, CONTAINER_VERSION)
    count = r.u32()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32()
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            r.fail("tensor name is not valid UTF-8")
        rank = r.u32()
        if rank > 8:
            r.pos -= 4
            r.fail(f"implausible tensor rank {rank}")
        shape = tuple(r.u32() for _ in range(rank))
        data = r.floats(int(np.prod(shape)) if shape else 1)
        out[name] = data.reshape(shape).astype(np.float32)
    if r.pos != len(r.blob):
        r.fail(f"trailing {len(r.blob) - r.pos} bytes")
    return out
