"""Uniform symmetric quantization with int4 nibble / int8 byte packing.

Every scaling unit ``u`` (a vector, a block or a group of ``g`` coordinates)
gets ``scale_u = absmax(u) / (2**(bits-1) - 1)`` stored as float32, and each
value becomes ``round(value / scale_u)`` clamped to the symmetric range, with
ties rounded away from zero. Per-channel schemes multiply by a per-coordinate
``lam`` before the abs-max and divide it back out on dequantization.

3- and 4-bit codes are nibble-packed (low nibble = even index); 6- and 8-bit
codes take one byte each.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DataError, FormatError, RangeError, ShapeError

__all__ = [
    "Granularity",
    "QuantScheme",
    "QuantizedBlock",
    "LAMBDA_FLOOR",
    "qmax",
    "round_half_away",
    "as_channel_scale",
    "quantize",
    "dequantize",
    "pack_nibbles",
    "unpack_nibbles",
    "compression_ratio",
    "bytes_per_vector",
]

SUPPORTED_BITS = (3, 4, 6, 8)
LAMBDA_FLOOR = 1e-6

BLOCK_MAGIC = b"RKVQ"
BLOCK_VERSION = 1
FLAG_LAMBDA = 1
FLAG_BLOCK_SCALE = 2
_HEADER = struct.Struct("<4sIIIIQI")


class Granularity(enum.Enum):
    PER_TOKEN = "per_token"
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"
    PER_GROUP = "per_group"
    PER_CHANNEL_GROUP = "per_channel_group"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown granularity {value!r}") from None

    @property
    def needs_lambda(self):
        return self in (Granularity.PER_CHANNEL, Granularity.PER_CHANNEL_GROUP)

    @property
    def grouped(self):
        return self in (Granularity.PER_GROUP, Granularity.PER_CHANNEL_GROUP)

    @property
    def block_scale(self):
        return self in (Granularity.PER_TENSOR, Granularity.PER_CHANNEL)


@dataclass(frozen=True)
class QuantScheme:
    """Bit width and scaling granularity for vectors of dimension ``d``.

    ``group`` is required for the grouped granularities and ignored (stored
    as 0) otherwise.
    """

    bits: int
    granularity: Granularity
    d: int
    group: int = 0

    def __post_init__(self):
        gran = Granularity.parse(self.granularity)
        object.__setattr__(self, "granularity", gran)
        if self.bits not in SUPPORTED_BITS:
            raise ConfigError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"d must be even and >= 2, got {self.d}")
        if gran.grouped:
            if not self.group or self.group < 1 or self.d % self.group:
                raise ConfigError(f"group={self.group} must divide d={self.d}")
        else:
            object.__setattr__(self, "group", 0)

    @property
    def qmax(self):
        return qmax(self.bits)

    @property
    def packed(self):
        return self.bits <= 4

    @property
    def code_bytes_per_vec(self):
        return self.d // 2 if self.packed else self.d

    def scales_per_vec(self):
        """Scale count per vector, or 0 for block-level schemes."""
        g = self.granularity
        if g is Granularity.PER_TOKEN:
            return 1
        if g.grouped:
            return self.d // self.group
        return 0

    def label(self):
        s = f"int{self.bits}-{self.granularity.value}"
        return f"{s}-g{self.group}" if self.group else s


def qmax(bits):
    return (1 << (bits - 1)) - 1


def round_half_away(r):
    """Round to nearest, ties away from zero, without the ``x + 0.5`` pitfall."""
    a = np.abs(r)
    f = np.floor(a)
    q = f + (a - f >= 0.5)
    return np.copysign(q, r)


def as_channel_scale(lam, d):
    """Validate a per-coordinate scale: float32, length ``d``, floored at 1e-6."""
    lam = np.asarray(lam, dtype=np.float32)
    if lam.shape != (d,):
        raise ShapeError(f"lambda must have shape ({d},), got {lam.shape}")
    if not np.all(np.isfinite(lam)):
        raise DataError("lambda contains non-finite values")
    return np.maximum(lam, np.float32(LAMBDA_FLOOR))


def _unit_view(w, scheme):
    n, d = w.shape
    g = scheme.granularity
    if g is Granularity.PER_TOKEN:
        return w.reshape(n, 1, d)
    if g.grouped:
        return w.reshape(n, d // scheme.group, scheme.group)
    return w.reshape(1, 1, n * d)


@dataclass
class QuantizedBlock:
    """Packed codes plus scale payload for ``n_vec`` vectors.

    ``codes`` is a uint8 array of shape ``(n_vec, code_bytes_per_vec)``;
    ``scales`` is float32 of shape ``(n_vec, d // unit)`` or ``(1, 1)`` for
    block-level schemes. ``lam`` records the per-channel scale used, if any.
    """

    codes: np.ndarray
    scales: np.ndarray
    n_vec: int
    scheme: QuantScheme
    lam: np.ndarray | None = None

    def int_codes(self):
        """Unpacked signed codes, shape ``(n_vec, d)``, int8."""
        if self.scheme.packed:
            return unpack_nibbles(self.codes, self.scheme.d)
        return self.codes.view(np.int8).reshape(self.n_vec, self.scheme.d)

    @property
    def nbytes(self):
        lam_bytes = 0 if self.lam is None else self.lam.nbytes
        return self.codes.nbytes + self.scales.nbytes + lam_bytes

    def to_bytes(self):
        s = self.scheme
        flags = 0
        if self.lam is not None:
            flags |= FLAG_LAMBDA
        if s.granularity.block_scale:
            flags |= FLAG_BLOCK_SCALE
        header = _HEADER.pack(BLOCK_MAGIC, BLOCK_VERSION, s.d, s.bits, s.group, self.n_vec, flags)
        parts = [header]
        if self.lam is not None:
            parts.append(np.ascontiguousarray(self.lam, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(self.scales, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(self.codes, dtype=np.uint8).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf, offset=0):
        """Parse one block; returns ``(block, next_offset)``."""
        buf = memoryview(buf)
        if len(buf) - offset < _HEADER.size:
            raise FormatError("truncated block header")
        magic, version, d, bits, group, n_vec, flags = _HEADER.unpack_from(buf, offset)
        if magic != BLOCK_MAGIC:
            raise FormatError(f"bad block magic {magic!r}")
        if version != BLOCK_VERSION:
            raise FormatError(f"unsupported block version {version}")
        has_lam = bool(flags & FLAG_LAMBDA)
        block_scale = bool(flags & FLAG_BLOCK_SCALE)
        if group:
            gran = Granularity.PER_CHANNEL_GROUP if has_lam else Granularity.PER_GROUP
        elif block_scale:
            gran = Granularity.PER_CHANNEL if has_lam else Granularity.PER_TENSOR
        else:
            gran = Granularity.PER_TOKEN
        scheme = QuantScheme(bits=bits, granularity=gran, d=d, group=group)
        pos = offset + _HEADER.size

        def take(count, dtype):
            nonlocal pos
            size = count * np.dtype(dtype).itemsize
            if pos + size > len(buf):
                raise FormatError("truncated block payload")
            arr = np.frombuffer(buf[pos:pos + size], dtype=dtype).copy()
            pos += size
            return arr

        lam = take(d, "<f4").astype(np.float32) if has_lam else None
        if block_scale:
            scales = take(1, "<f4").astype(np.float32).reshape(1, 1)
        else:
            per = scheme.scales_per_vec()
            scales = take(n_vec * per, "<f4").astype(np.float32).reshape(n_vec, per)
        codes = take(n_vec * scheme.code_bytes_per_vec, np.uint8).reshape(n_vec, -1)
        return cls(codes=codes, scales=scales, n_vec=int(n_vec), scheme=scheme, lam=lam), pos


def quantize(scheme, X, lam=None):
    """Quantize a batch of vectors (``(n, d)`` or ``(d,)``) into a block."""
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != scheme.d:
        raise ShapeError(f"expected shape (n, {scheme.d}), got {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError("cannot quantize an empty batch")
    if not np.all(np.isfinite(X)):
        raise DataError("input contains NaN or Inf")
    gran = scheme.granularity
    if gran.needs_lambda and lam is None:
        raise ConfigError(f"{gran.value} requires a per-channel lambda")
    if not gran.needs_lambda and lam is not None:
        raise ConfigError(f"{gran.value} does not take a lambda")

    w = X.astype(np.float32)
    if lam is not None:
        lam = as_channel_scale(lam, scheme.d)
        w = w * lam
    n = w.shape[0]
    q = np.float32(scheme.qmax)
    units = _unit_view(w, scheme)
    scale = (np.abs(units).max(axis=-1, keepdims=True) / q).astype(np.float32)
    r = np.divide(units, scale, out=np.zeros_like(units), where=scale > 0)
    codes = np.clip(round_half_away(r), -q, q).astype(np.int8).reshape(n, scheme.d)

    if scheme.packed:
        packed = pack_nibbles(codes, scheme.d)
    else:
        packed = codes.view(np.uint8).copy()
    scales = scale.reshape(1, 1) if gran.block_scale else scale.reshape(n, -1)
    return QuantizedBlock(codes=packed, scales=scales, n_vec=n, scheme=scheme,
                          lam=None if lam is None else lam.copy())


def dequantize(block, lam=None):
    """Reconstruct ``code * scale`` (divided by ``lam`` for per-channel schemes)."""
    scheme = block.scheme
    codes = block.int_codes().astype(np.float32)
    units = _unit_view(codes, scheme)
    values = (units * block.scales.reshape(units.shape[0], units.shape[1], 1)).reshape(
        block.n_vec, scheme.d)
    if scheme.granularity.needs_lambda:
        use = block.lam if lam is None else lam
        if use is None:
            raise ConfigError("block was quantized with a lambda but none is available")
        values = values / as_channel_scale(use, scheme.d)
    elif lam is not None:
        raise ConfigError(f"{scheme.granularity.value} does not take a lambda")
    return values


def pack_nibbles(codes, d):
    """Pack signed 4-bit codes two per byte: ``(q[2i+1] << 4) | (q[2i] & 0xF)``."""
    codes = np.asarray(codes)
    if codes.shape[-1] != d or d % 2:
        raise ShapeError(f"expected even trailing dimension {d}, got {codes.shape}")
    c = codes.astype(np.int16)
    if c.size and (c.min() < -8 or c.max() > 7):
        raise RangeError("nibble codes must lie in [-8, 7]")
    lo = c[..., 0::2] & 0xF
    hi = (c[..., 1::2] & 0xF) << 4
    return (hi | lo).astype(np.uint8)


def unpack_nibbles(buf, d):
    """Inverse of :func:`pack_nibbles`; returns int8 codes with sign extension."""
    b = np.asarray(buf, dtype=np.uint8)
    if b.shape[-1] * 2 != d:
        raise ShapeError(f"expected trailing dimension {d // 2}, got {b.shape}")
    lo = (b & 0xF).astype(np.int8)
    hi = (b >> 4).astype(np.int8)
    lo = np.where(lo >= 8, lo - 16, lo)
    hi = np.where(hi >= 8, hi - 16, hi)
    out = np.empty(b.shape[:-1] + (d,), dtype=np.int8)
    out[..., 0::2] = lo
    out[..., 1::2] = hi
    return out


def bytes_per_vector(scheme, n_vec=None):
    """Exact stored bytes per vector as a Fraction.

    Block-level costs (one per-tensor scale, the lambda vector) are amortized
    over ``n_vec``; ``n_vec=None`` is the large-block limit where they vanish.
    """
    d = scheme.d
    total = Fraction(scheme.code_bytes_per_vec)
    gran = scheme.granularity
    total += 4 * scheme.scales_per_vec()
    if n_vec is not None:
        if n_vec <= 0:
            raise RangeError("n_vec must be positive")
        if gran.block_scale:
            total += Fraction(4, n_vec)
        if gran.needs_lambda:
            total += Fraction(4 * d, n_vec)
    return total


def compression_ratio(scheme, n_vec=None):
    """fp16 bytes over stored bytes per vector, e.g. ``2d / (d/2 + 4)`` for int4 per-token."""
    return Fraction(2 * scheme.d) / bytes_per_vector(scheme, n_vec)
