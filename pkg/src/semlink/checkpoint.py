"""Named-tensor checkpoint container.

All model files share one framing, distinguished by a 4-byte magic:
"MSE1" (image encoder), "MST1" (text scorer), "MSF1" (fusion
parameters), "MSD1" (denoiser).  Layout, little-endian throughout:

    magic (4) | u32 tensor count | per tensor:
        u16 name length | name utf-8 | u8 ndim | u32 dims... | f32 data

Payloads are float32, so saving float64 weights rounds them once; a
save/load/save cycle is byte-stable.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

__all__ = ["save_tensors", "load_tensors",
           "MAGIC_ENCODER", "MAGIC_SCORER", "MAGIC_FUSION", "MAGIC_DENOISER"]

MAGIC_ENCODER = b"MSE1"
MAGIC_SCORER = b"MST1"
MAGIC_FUSION = b"MSF1"
MAGIC_DENOISER = b"MSD1"


def save_tensors(path, magic: bytes, tensors: dict[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    parts = [magic, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_tensors(path, magic: bytes) -> dict[str, np.ndarray]:
    """Load a container, returning float64 arrays keyed by name.

    Raises:
        FormatError: wrong magic or truncated/corrupt payload.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != magic:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {magic!r}",
                          offset=0)
    if len(blob) < 8:
        raise FormatError("truncated header", offset=len(blob))
    (count,) = struct.unpack_from("<I", blob, 4)
    cursor = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, cursor)
            cursor += 2
            name = blob[cursor:cursor + name_len].decode("utf-8")
            cursor += name_len
            (ndim,) = struct.unpack_from("<B", blob, cursor)
            cursor += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, cursor)
            cursor += 4 * ndim
        except struct.error as exc:
            raise FormatError(f"truncated tensor header: {exc}",
                              offset=cursor) from exc
        n = int(np.prod(dims)) if ndim else 1
        end = cursor + 4 * n
        if end > len(blob):
            raise FormatError(f"truncated payload for tensor {name!r}",
                              offset=cursor)
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=cursor)
        out[name] = data.astype(np.float64).reshape(dims)
        cursor = end
    if cursor != len(blob):
        raise FormatError("trailing bytes after last tensor", offset=cursor)
    return out
