"""Walsh/Hadamard orthogonal multiplexing of per-user payload vectors.

Classical direct-sequence spreading: each scalar payload symbol is
repeated across d chips weighted by the user's +-1 code row, user
streams are summed on the air, and each receiver recovers its payload
by per-block inner products with its own code divided by gain * d.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .channel import ChannelConfig, transmit
from .errors import FormatError

__all__ = ["WalshMatrix", "walsh_matrix", "spread", "superpose", "despread",
           "multiuser_transmit", "encode_multiuser_frame",
           "decode_multiuser_frame", "MULTIUSER_MAGIC"]

MULTIUSER_MAGIC = b"MSU1"


@dataclass(frozen=True)
class WalshMatrix:
    """d x d matrix of +-1 codes; row i is user i's spreading code."""
    d: int
    rows: np.ndarray  # (d, d) int64

    def row(self, i: int) -> np.ndarray:
        return self.rows[i]


def walsh_matrix(d: int) -> WalshMatrix:
    """Sylvester construction; exactly orthogonal in integer arithmetic.

    Raises:
        ValueError: d not a power of two >= 2.
    """
    if d < 2 or (d & (d - 1)) != 0:
        raise ValueError(f"dimension must be a power of two >= 2, got {d}")
    m = np.array([[1]], dtype=np.int64)
    while m.shape[0] < d:
        m = np.block([[m, m], [m, -m]])
    return WalshMatrix(d=d, rows=m)


def spread(v: np.ndarray, code: np.ndarray) -> np.ndarray:
    """Spread each payload scalar over len(code) chips."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot spread an empty payload")
    code = np.asarray(code, dtype=np.float64)
    return np.outer(v, code).ravel()


def superpose(streams) -> np.ndarray:
    """Element-wise sum of the users' chip streams."""
    streams = [np.asarray(s, dtype=np.float64) for s in streams]
    if not streams:
        raise ValueError("need at least one stream")
    length = streams[0].size
    if any(s.size != length for s in streams):
        raise ValueError("chip streams must have equal length")
    total = np.zeros(length)
    for s in streams:
        total += s
    return total


def despread(y: np.ndarray, code: np.ndarray, gain: float, d: int) -> np.ndarray:
    """Recover one user's payload from the superposed chip stream.

    Each d-chip block contributes one scalar: block . code / (gain * d).
    """
    if gain == 0.0:
        raise ValueError("gain must be nonzero")
    y = np.asarray(y, dtype=np.float64)
    if y.size % d != 0:
        raise ValueError(f"stream length {y.size} not divisible by d={d}")
    code = np.asarray(code, dtype=np.float64)
    return y.reshape(-1, d) @ code / (gain * d)


def multiuser_transmit(users: list[tuple[np.ndarray, np.ndarray]],
                       cfg: ChannelConfig) -> list[np.ndarray]:
    """Spread all users, superpose, cross the AWGN link once, despread.

    The chip stream is treated as an analog superposition, so the
    channel's 32-bit quantization is disabled for it; per-user payloads
    are quantized where they are serialized (the MSU1 frame).

    Args:
        users: (payload vector, Walsh code row) per user; payloads must
            share a common length, codes a common dimension d, n <= d.

    Raises:
        ValueError: duplicate codes, too many users, or length mismatch.
    """
    if not users:
        raise ValueError("need at least one user")
    d = len(users[0][1])
    if len(users) > d:
        raise ValueError(f"{len(users)} users exceed code dimension {d}")
    codes = np.stack([np.asarray(c) for _, c in users])
    if codes.shape[1] != d or any(len(c) != d for _, c in users):
        raise ValueError("all codes must have the same dimension")
    for i in range(len(users)):
        for j in range(i + 1, len(users)):
            if np.array_equal(codes[i], codes[j]):
                raise ValueError(f"users {i} and {j} share a code")

    streams = [spread(v, c) for v, c in users]
    mixed = superpose(streams)
    received = transmit(mixed, replace(cfg, quantize=False))
    return [despread(received, c, cfg.gain, d) for _, c in users]


def encode_multiuser_frame(chips: np.ndarray, d: int, n_users: int,
                           payload_len: int) -> bytes:
    """Frame a chip stream: "MSU1", u32 d, u32 n_users, u32 payload_len,
    then little-endian f32 chips.
    """
    header = MULTIUSER_MAGIC + struct.pack("<III", d, n_users, payload_len)
    return header + np.asarray(chips).astype("<f4").tobytes()


def decode_multiuser_frame(blob: bytes) -> tuple[np.ndarray, int, int, int]:
    if blob[:4] != MULTIUSER_MAGIC:
        raise FormatError(
            f"bad magic {blob[:4]!r}, expected {MULTIUSER_MAGIC!r}", offset=0)
    if len(blob) < 16:
        raise FormatError("truncated multiuser header", offset=len(blob))
    d, n_users, payload_len = struct.unpack_from("<III", blob, 4)
    if (len(blob) - 16) % 4 != 0:
        raise FormatError("chip payload length not a multiple of 4", offset=16)
    chips = np.frombuffer(blob, dtype="<f4", offset=16).astype(np.float64)
    if chips.size != payload_len * d:
        raise FormatError(
            f"expected {payload_len * d} chips, found {chips.size}", offset=16)
    return chips, d, n_users, payload_len
