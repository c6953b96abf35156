"""Power-normalized AWGN transmission, wire framing and cost accounting.

SNR is defined against the post-quantization mean square power per
transmitted symbol: sigma^2 = mean(v_q^2) / 10^(snr_db/10).  Feature
values cross the air as 32-bit floats (`quantize=True`); the multiuser
chip stream disables quantization because superposed chips are modeled
as analog (see `multiuser`).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateSignalError, FormatError
from .rng import Rng

__all__ = [
    "ChannelConfig", "transmit", "quantize_f32", "encode_frame",
    "decode_frame", "OverheadReport", "overhead_sequential",
    "overhead_simultaneous", "CostReport", "complexity_report", "WIRE_MAGIC",
]

WIRE_MAGIC = b"MSW1"
_WIRE_MODES = {"sequential": 0, "simultaneous": 1, "raw": 2}


@dataclass
class ChannelConfig:
    """One AWGN link. `snr_db=inf` disables noise entirely."""
    snr_db: float
    gain: float = 1.0
    rng: Rng = field(default_factory=lambda: Rng(0, 0))
    quantize: bool = True

    def __post_init__(self):
        if self.gain == 0.0:
            raise ValueError("channel gain must be nonzero")
        if math.isnan(self.snr_db):
            raise ValueError("snr_db must be finite or +inf")

    def noiseless(self) -> "ChannelConfig":
        return replace(self, snr_db=math.inf)


def quantize_f32(v: np.ndarray) -> np.ndarray:
    """Round to the nearest 32-bit float value (kept in float64)."""
    return np.asarray(v, dtype=np.float64).astype(np.float32).astype(np.float64)


def transmit(v: np.ndarray, cfg: ChannelConfig) -> np.ndarray:
    """Send a real vector through the AWGN link.

    Returns gain * v_q + n with n ~ N(0, sigma^2 I), where sigma^2 is
    set by the post-quantization signal power and the configured SNR.

    Raises:
        ValueError: empty or non-finite input.
        DegenerateSignalError: zero-power vector at finite SNR.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot transmit an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot transmit non-finite values")
    vq = quantize_f32(v) if cfg.quantize else v
    if math.isinf(cfg.snr_db):
        return cfg.gain * vq
    power = float((vq ** 2).mean())
    if power == 0.0:
        raise DegenerateSignalError(
            "zero-power signal has no defined noise variance at finite SNR")
    sigma = math.sqrt(power / 10.0 ** (cfg.snr_db / 10.0))
    noise = sigma * cfg.rng.normal(v.shape)
    return cfg.gain * vq + noise


def encode_frame(payload: np.ndarray, mode: str,
                 dims: tuple[int, int, int]) -> bytes:
    """Frame a feature vector for the wire: "MSW1" header + f32 payload."""
    if mode not in _WIRE_MODES:
        raise ValueError(f"unknown wire mode {mode!r}")
    header = WIRE_MAGIC + struct.pack("<BIII", _WIRE_MODES[mode], *dims)
    return header + np.asarray(payload).astype("<f4").tobytes()


def decode_frame(blob: bytes) -> tuple[np.ndarray, str, tuple[int, int, int]]:
    if blob[:4] != WIRE_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {WIRE_MAGIC!r}",
                          offset=0)
    if len(blob) < 17:
        raise FormatError("truncated wire header", offset=len(blob))
    mode_byte, d0, d1, d2 = struct.unpack_from("<BIII", blob, 4)
    modes = {v: k for k, v in _WIRE_MODES.items()}
    if mode_byte not in modes:
        raise FormatError(f"unknown mode byte {mode_byte}", offset=4)
    if (len(blob) - 17) % 4 != 0:
        raise FormatError("payload length not a multiple of 4", offset=17)
    payload = np.frombuffer(blob, dtype="<f4", offset=17).astype(np.float64)
    return payload, modes[mode_byte], (d0, d1, d2)


@dataclass(frozen=True)
class OverheadReport:
    """Byte cost of one transmission mode at given feature dimensions."""
    mode: str
    bytes: int
    params: dict

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "bytes": self.bytes,
                           "params": self.params}, sort_keys=True)


def overhead_sequential(n_text: int, d_text: int, d_image: int) -> OverheadReport:
    """Bytes to send the prompt-feature matrix plus the image feature:
    4 * (n_text * d_text + d_image) at 4 bytes per value.
    """
    if min(n_text, d_text, d_image) <= 0:
        raise ValueError("dimensions must be positive")
    total = 4 * (n_text * d_text + d_image)
    return OverheadReport("sequential", total,
                          {"n_text": n_text, "d_text": d_text,
                           "d_image": d_image})


def overhead_simultaneous(d_fusion: int) -> OverheadReport:
    """Bytes to send the fused vector: 4 * d_fusion."""
    if d_fusion <= 0:
        raise ValueError("d_fusion must be positive")
    return OverheadReport("simultaneous", 4 * d_fusion, {"d_fusion": d_fusion})


_DEFAULT_DIMS = {
    "n_text": 3, "d_text": 32, "d_image": 32, "d_fusion": 64,
    "d_conv": 256, "d1": 128, "h": 32, "w": 32, "c_res": 16, "n_heads": 4,
}


@dataclass(frozen=True)
class CostReport:
    """Operation-count estimates for each pipeline stage and both modes."""
    terms: dict
    sequential_total: float
    simultaneous_total: float

    def to_json(self) -> str:
        return json.dumps({"terms": self.terms,
                           "sequential_total": self.sequential_total,
                           "simultaneous_total": self.simultaneous_total},
                          sort_keys=True)


def complexity_report(dims: dict | None = None, p: int = 512, q: int = 32,
                      T: int = 40, L: int = 4, K: int = 3) -> CostReport:
    """Substitute constants into the per-stage complexity expressions.

    Args:
        dims: feature dimensions; missing keys fall back to desk-scale
            defaults (n_text, d_text, d_image, d_fusion, d_conv, d1,
            h, w, c_res).
        p: generated candidate count.
        q: sequential-stage shortlist size.
        T: diffusion inference steps.
        L: denoiser layer count.
        K: convolution kernel size.
    """
    if min(p, q, T, L, K) <= 0:
        raise ValueError("p, q, T, L, K must be positive")
    d = dict(_DEFAULT_DIMS)
    d.update(dims or {})

    o_image = (d["h"] * d["w"] * d["c_res"] * K ** 2
               + d["d_conv"] * d["d1"] + d["d1"] * d["d_image"])
    o_text = d["n_text"] * d["d_text"] ** 2
    o_attention = (d["d_image"] * d["d_fusion"]
                   + d["n_text"] * d["d_text"] * d["d_fusion"]
                   + d["d_fusion"] + d["d_fusion"] ** 2)
    o_diffusion = p * T * d["h"] * d["w"] * 3 * L * K ** 2
    o_seq = p * d["n_text"] * d["d_text"] + q * d["d_image"]
    o_sim = p * d["d_fusion"]

    seq_total = (p + 1) * o_text + (q + 1) * o_image + o_diffusion + o_seq
    sim_total = ((p + 1) * (o_text + o_image) + o_diffusion
                 + p * o_attention + o_sim)
    terms = {"image": float(o_image), "text": float(o_text),
             "attention": float(o_attention), "diffusion": float(o_diffusion),
             "seq_select": float(o_seq), "sim_select": float(o_sim)}
    return CostReport(terms, float(seq_total), float(sim_total))
