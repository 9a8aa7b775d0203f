"""Round-to-nearest integer weight quantization with per-row scales.

Asymmetric mode maps each row's ``[min, max]`` onto ``[0, 2^n - 1]``;
symmetric mode maps ``[-max|x|, max|x|]`` onto ``[-(2^(n-1) - 1), 2^(n-1) - 1]``
and stores codes shifted by ``2^(n-1) - 1`` so the payload stays unsigned.
4-bit codes are packed two per byte, low nibble first (flat row-major
element order, so with an even column count the low nibble holds the even
column).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, InputError
from .tensor_core import as_tensor

SUPPORTED_BITS = (4, 8)
ASYMMETRIC = "asymmetric"
SYMMETRIC = "symmetric"
MODES = (ASYMMETRIC, SYMMETRIC)
_MODE_TAGS = {ASYMMETRIC: 0, SYMMETRIC: 1}
_HEADER = struct.Struct("<BBII")
_INT32 = np.iinfo(np.int32)


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise ConfigurationError(f"unsupported bit-width {bits}; expected one of {SUPPORTED_BITS}")


def code_range(bits: int, mode: str) -> tuple[int, int]:
    """(q_min, q_max) of the signed/unsigned code range before storage offset."""
    _check_bits(bits)
    if mode == ASYMMETRIC:
        return 0, 2**bits - 1
    if mode == SYMMETRIC:
        half = 2 ** (bits - 1) - 1
        return -half, half
    raise ConfigurationError(f"unknown quantization mode {mode!r}")


def storage_offset(bits: int, mode: str) -> int:
    return -code_range(bits, mode)[0]


def payload_nbytes(rows: int, cols: int, bits: int) -> int:
    return (rows * cols * bits + 7) // 8


def pack_codes(codes, bits: int) -> np.ndarray:
    """Pack unsigned codes (flat) into a uint8 payload."""
    _check_bits(bits)
    codes = np.asarray(codes).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() >= 2**bits):
        raise InputError(f"codes out of range for {bits}-bit packing")
    codes = codes.astype(np.uint8)
    if bits == 8:
        return codes.copy()
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def unpack_codes(payload, count: int, bits: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns ``count`` uint8 codes."""
    _check_bits(bits)
    payload = np.asarray(payload, dtype=np.uint8).reshape(-1)
    if payload.size != (count * bits + 7) // 8:
        raise FormatError(f"payload holds {payload.size} bytes, expected {(count * bits + 7) // 8}")
    if bits == 8:
        return payload.copy()
    out = np.empty(payload.size * 2, dtype=np.uint8)
    out[0::2] = payload & 0x0F
    out[1::2] = payload >> 4
    return out[:count]


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    bits: int
    rows: int
    cols: int
    payload: np.ndarray  # uint8
    scale: np.ndarray  # float32, one per row
    zero_point: np.ndarray  # int32, one per row
    mode: str = ASYMMETRIC

    def __post_init__(self):
        _check_bits(self.bits)
        code_range(self.bits, self.mode)
        if self.payload.dtype != np.uint8 or self.payload.ndim != 1:
            raise FormatError("payload must be a flat uint8 array")
        if self.payload.size != payload_nbytes(self.rows, self.cols, self.bits):
            raise FormatError(
                f"payload length {self.payload.size} != "
                f"{payload_nbytes(self.rows, self.cols, self.bits)} for {self.rows}x{self.cols} @ {self.bits} bits"
            )
        if self.scale.shape != (self.rows,) or self.zero_point.shape != (self.rows,):
            raise FormatError("scale/zero_point must hold one entry per row")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def param_count(self) -> int:
        return self.rows * self.cols

    def stored_codes(self) -> np.ndarray:
        """Unsigned codes as held in the payload, shape ``rows x cols``."""
        return unpack_codes(self.payload, self.rows * self.cols, self.bits).reshape(self.rows, self.cols)

    def codes(self) -> np.ndarray:
        """Codes in ``[q_min, q_max]`` (signed for symmetric mode)."""
        return self.stored_codes().astype(np.int64) - storage_offset(self.bits, self.mode)

    def same_encoding(self, other: "QuantizedTensor") -> bool:
        return (
            self.bits == other.bits
            and self.mode == other.mode
            and self.shape == other.shape
            and np.array_equal(self.payload, other.payload)
            and np.array_equal(self.scale, other.scale)
            and np.array_equal(self.zero_point, other.zero_point)
        )

    def to_bytes(self) -> bytes:
        return b"".join(
            [
                _HEADER.pack(self.bits, _MODE_TAGS[self.mode], self.rows, self.cols),
                self.scale.astype("<f4").tobytes(),
                self.zero_point.astype("<i4").tobytes(),
                self.payload.tobytes(),
            ]
        )

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["QuantizedTensor", int]:
        """Parse one tensor starting at ``offset``; returns it with the end offset."""
        if len(buf) - offset < _HEADER.size:
            raise FormatError("truncated quantized tensor header")
        bits, mode_tag, rows, cols = _HEADER.unpack_from(buf, offset)
        modes = {v: k for k, v in _MODE_TAGS.items()}
        if mode_tag not in modes:
            raise FormatError(f"unknown mode tag {mode_tag}")
        if bits not in SUPPORTED_BITS:
            raise FormatError(f"unsupported bit-width {bits} in stream")
        pos = offset + _HEADER.size
        nbytes = payload_nbytes(rows, cols, bits)
        end = pos + 4 * rows + 4 * rows + nbytes
        if end > len(buf):
            raise FormatError("truncated quantized tensor body")
        scale = np.frombuffer(buf, dtype="<f4", count=rows, offset=pos).astype(np.float32)
        pos += 4 * rows
        zero = np.frombuffer(buf, dtype="<i4", count=rows, offset=pos).astype(np.int32)
        pos += 4 * rows
        payload = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=pos).copy()
        return cls(bits, rows, cols, payload, scale, zero, modes[mode_tag]), end


def _as_matrix(x) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D weight matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("cannot quantize non-finite values")
    return x


def _positive_f32(s: np.ndarray) -> np.ndarray:
    s32 = s.astype(np.float32)
    # a nonzero span can still underflow float32
    return np.where(s32 > 0, s32, np.finfo(np.float32).tiny).astype(np.float32)


def quantize_asymmetric(x, bits: int) -> QuantizedTensor:
    x = _as_matrix(x)
    q_min, q_max = code_range(bits, ASYMMETRIC)
    rows, cols = x.shape
    xmin = x.min(axis=1)
    xmax = x.max(axis=1)
    constant = xmax == xmin

    scale = _positive_f32((xmax - xmin) / (q_max - q_min))
    s = scale.astype(np.float64)
    zero = np.rint(q_min - xmin / s)
    codes = np.clip(np.rint(x / s[:, None] + zero[:, None]), q_min, q_max)

    # constant rows: one code step reproduces the value exactly
    if np.any(constant):
        c = xmin[constant]
        scale[constant] = np.where(c == 0, 1.0, np.abs(c)).astype(np.float32)
        zero[constant] = np.where(c < 0, q_min + 1, q_min)
        codes[constant] = np.where(c > 0, q_min + 1, q_min)[:, None]

    if np.any(zero < _INT32.min) or np.any(zero > _INT32.max):
        raise InputError("zero point does not fit in int32; row range is too narrow for its offset")
    payload = pack_codes(codes.astype(np.int64) - q_min, bits)
    return QuantizedTensor(bits, rows, cols, payload, scale, zero.astype(np.int32), ASYMMETRIC)


def quantize_symmetric(x, bits: int) -> QuantizedTensor:
    x = _as_matrix(x)
    q_min, q_max = code_range(bits, SYMMETRIC)
    rows, cols = x.shape
    amax = np.abs(x).max(axis=1)
    constant = x.max(axis=1) == x.min(axis=1)

    scale = _positive_f32(np.where(amax > 0, amax / q_max, 1.0))
    s = scale.astype(np.float64)
    codes = np.clip(np.rint(x / s[:, None]), q_min, q_max)

    if np.any(constant):
        c = x[constant, 0]
        scale[constant] = np.where(c == 0, 1.0, np.abs(c)).astype(np.float32)
        codes[constant] = np.sign(c)[:, None]

    payload = pack_codes(codes.astype(np.int64) - q_min, bits)
    zero = np.zeros(rows, dtype=np.int32)
    return QuantizedTensor(bits, rows, cols, payload, scale, zero, SYMMETRIC)


def quantize(x, bits: int, mode: str = ASYMMETRIC) -> QuantizedTensor:
    if mode == ASYMMETRIC:
        return quantize_asymmetric(x, bits)
    if mode == SYMMETRIC:
        return quantize_symmetric(x, bits)
    raise ConfigurationError(f"unknown quantization mode {mode!r}")


def dequantize(q: QuantizedTensor) -> np.ndarray:
    codes = q.codes()
    return (codes - q.zero_point.astype(np.int64)[:, None]) * q.scale.astype(np.float64)[:, None]


def quant_error_stats(x, q: QuantizedTensor) -> tuple[float, float]:
    """(max |x - x_hat|, mean (x - x_hat)^2)."""
    x = _as_matrix(x)
    if x.shape != q.shape:
        raise DimensionError(f"tensor shape {x.shape} != quantized shape {q.shape}")
    err = x - dequantize(q)
    if err.size == 0:
        return 0.0, 0.0
    return float(np.max(np.abs(err))), float(np.mean(err**2))
