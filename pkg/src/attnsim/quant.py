"""Linear symmetric fixed-point quantization with MSB/LSB bit planes.

Codes are stored in two's complement. A ``msb+lsb`` code splits into a
signed high field (arithmetic shift) and an unsigned low field, so that
``(msb << lsb_bits) | lsb`` reproduces the code exactly. DRAM images keep
the two planes in separate contiguous byte streams, each packed
little-endian within a byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MSB_CHOICES = (4, 6, 8, 10, 12)
LSB_CHOICES = (0, 4)
TOTAL_BITS_CHOICES = (8, 10, 12, 14, 16)
CONVERTER_BITS = (4, 8, 12)
ONCHIP_BITS = 12

# quantize() rounds half away from zero
ROUNDING = "half_away_from_zero"


@dataclass(frozen=True)
class QuantParams:
    scale: float
    msb_bits: int
    lsb_bits: int = 0
    signed: bool = True

    def __post_init__(self):
        if self.msb_bits not in MSB_CHOICES:
            raise ValueError(f"msb_bits must be one of {MSB_CHOICES}, got {self.msb_bits}")
        if self.lsb_bits not in LSB_CHOICES:
            raise ValueError(f"lsb_bits must be one of {LSB_CHOICES}, got {self.lsb_bits}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def total_bits(self) -> int:
        return self.msb_bits + self.lsb_bits

    @property
    def qmax(self) -> int:
        return 2 ** (self.total_bits - 1) - 1


@dataclass(frozen=True)
class QuantTensor:
    codes: np.ndarray
    params: QuantParams

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.params.scale


def _default_split(total_bits: int) -> tuple[int, int]:
    if total_bits in MSB_CHOICES:
        return total_bits, 0
    return total_bits - 4, 4


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, total_bits: int = 12, msb_bits: int | None = None) -> QuantTensor:
    """Quantize ``x`` with one per-tensor scale at ``total_bits`` bits.

    ``msb_bits`` picks the MSB/LSB split; by default 8/10/12 bits are a
    single MSB field and 14/16 bits split as ``10+4``/``12+4``.
    """
    x = np.asarray(x, dtype=np.float64)
    if total_bits not in TOTAL_BITS_CHOICES:
        raise ValueError(f"total_bits must be one of {TOTAL_BITS_CHOICES}, got {total_bits}")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    if msb_bits is None:
        msb_bits, lsb_bits = _default_split(total_bits)
    else:
        lsb_bits = total_bits - msb_bits
    qmax = 2 ** (total_bits - 1) - 1
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    scale = amax / qmax if amax > 0 else 1.0
    codes = np.clip(round_half_away(x / scale), -qmax, qmax).astype(np.int64)
    return QuantTensor(codes, QuantParams(scale, msb_bits, lsb_bits))


def split_msb_lsb(t: QuantTensor) -> tuple[np.ndarray, np.ndarray]:
    lsb_bits = t.params.lsb_bits
    if lsb_bits == 0:
        raise ValueError("tensor has no LSB field to split")
    codes = np.asarray(t.codes, dtype=np.int64)
    return codes >> lsb_bits, codes & ((1 << lsb_bits) - 1)


def combine_msb_lsb(msb: np.ndarray, lsb: np.ndarray, lsb_bits: int) -> np.ndarray:
    return (np.asarray(msb, dtype=np.int64) << lsb_bits) | np.asarray(lsb, dtype=np.int64)


def msb_only_value(t: QuantTensor) -> QuantTensor:
    """Codes as seen when only the MSB plane has been fetched (LSB field zeroed)."""
    msb, _ = split_msb_lsb(t)
    return QuantTensor(msb << t.params.lsb_bits, t.params)


def pack_fields(values, bits: int) -> bytes:
    """Pack ``bits``-wide two's-complement fields into a little-endian bit stream."""
    vals = np.asarray(values, dtype=np.int64).ravel() & ((1 << bits) - 1)
    if (vals.size * bits) % 8:
        raise ValueError("field count does not fill a whole number of bytes")
    bitpos = np.arange(bits, dtype=np.int64)
    stream = ((vals[:, None] >> bitpos) & 1).astype(np.uint8).ravel()
    return np.packbits(stream, bitorder="little").tobytes()


def unpack_fields(stream: bytes, bits: int, signed: bool = True) -> np.ndarray:
    raw = np.frombuffer(bytes(stream), dtype=np.uint8)
    if (raw.size * 8) % bits:
        raise ValueError(f"stream of {raw.size} bytes is not a multiple of {bits}-bit fields")
    bitstream = np.unpackbits(raw, bitorder="little").astype(np.int64).reshape(-1, bits)
    vals = (bitstream << np.arange(bits, dtype=np.int64)).sum(axis=1)
    if signed:
        vals = np.where(vals >= 1 << (bits - 1), vals - (1 << bits), vals)
    return vals


def bitwidth_convert(dram_words: bytes, from_bits: int) -> np.ndarray:
    """Unpack 4/8/12-bit DRAM fields into sign-extended 12-bit on-chip codes."""
    if from_bits not in CONVERTER_BITS:
        raise ValueError(f"converter accepts {CONVERTER_BITS}-bit fields, got {from_bits}")
    return unpack_fields(dram_words, from_bits, signed=True)


def to_dram_image(t: QuantTensor) -> tuple[bytes, bytes]:
    """Row-major MSB plane and LSB plane (empty when there is no LSB field)."""
    p = t.params
    if p.lsb_bits == 0:
        return pack_fields(t.codes, p.msb_bits), b""
    msb, lsb = split_msb_lsb(t)
    return pack_fields(msb, p.msb_bits), pack_fields(lsb, p.lsb_bits)


def from_dram_image(msb_plane: bytes, lsb_plane: bytes, shape, params: QuantParams) -> QuantTensor:
    msb = unpack_fields(msb_plane, params.msb_bits, signed=True)
    if params.lsb_bits:
        lsb = unpack_fields(lsb_plane, params.lsb_bits, signed=False)
        codes = combine_msb_lsb(msb, lsb, params.lsb_bits)
    else:
        codes = msb
    return QuantTensor(codes.reshape(shape), params)


def plane_bytes(num_elements: int, bits: int) -> int:
    return -(-num_elements * bits // 8)
