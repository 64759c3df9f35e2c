"""Sign-randomized Fourier and Hadamard transforms.

Both transforms are exact real orthonormal maps on R^d:

* SRFT: ``pack(F @ diag(s) @ x)`` where ``F`` is the unitary DFT and ``pack``
  interleaves the half-spectrum into d reals with a sqrt(2) weight on the
  interior bins.
* SRHT: ``H_d @ diag(s) @ x / sqrt(d)`` with ``H_d`` the Sylvester
  Walsh-Hadamard matrix.

The SRFT fast path treats the real input as a complex sequence of length d/2,
runs radix-2 Stockham passes over it and Hermitian-unpacks the result. All
functions accept a single vector or a batch of shape ``(..., d)``; float32
input runs in complex64, anything else in complex128.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, RangeError, ShapeError

__all__ = [
    "TransformKind",
    "TransformSpec",
    "make_spec",
    "derive_signs",
    "srft_forward",
    "srft_inverse",
    "srht_forward",
    "srht_inverse",
    "forward",
    "inverse",
    "gaussianization_score",
    "fft_stockham",
]

D_MIN = 4
D_MAX = 4096

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class TransformKind(enum.Enum):
    SRFT = "srft"
    SRHT = "srht"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown transform kind {value!r}") from None


@dataclass(frozen=True, eq=False)
class TransformSpec:
    """Immutable description of one orthonormal transform.

    ``signs`` is a read-only int8 array of +-1 values; build instances with
    :func:`make_spec` rather than directly.
    """

    kind: TransformKind
    d: int
    seed: int
    signs: np.ndarray

    def __repr__(self):
        return f"TransformSpec(kind={self.kind.value}, d={self.d}, seed={self.seed})"

    def __eq__(self, other):
        if not isinstance(other, TransformSpec):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.d == other.d
            and self.seed == other.seed
            and np.array_equal(self.signs, other.signs)
        )

    def __hash__(self):
        return hash((self.kind, self.d, self.seed))


def _splitmix64(seed, n):
    # Counter-based: output i depends only on (seed, i).
    state = np.uint64(seed & _MASK64) + np.arange(1, n + 1, dtype=np.uint64) * _GAMMA
    z = (state ^ (state >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_signs(seed, d):
    """Return the +-1 sign vector for ``seed`` as int8 (top bit of SplitMix64)."""
    bits = _splitmix64(int(seed), d) >> np.uint64(63)
    return np.where(bits == 1, -1, 1).astype(np.int8)


def _check_dim(d):
    if isinstance(d, bool) or not isinstance(d, (int, np.integer)):
        raise DimensionError(f"d must be an integer, got {d!r}")
    d = int(d)
    if d <= 0 or d & (d - 1):
        raise DimensionError(f"d={d} is not a power of two")
    if not D_MIN <= d <= D_MAX:
        raise RangeError(f"d={d} outside supported range [{D_MIN}, {D_MAX}]")
    return d


def make_spec(kind, d, seed=0):
    """Build a :class:`TransformSpec`; the signs are a pure function of ``seed``."""
    kind = TransformKind.parse(kind)
    d = _check_dim(d)
    seed = int(seed)
    if kind is TransformKind.IDENTITY:
        signs = np.ones(d, dtype=np.int8)
    else:
        signs = derive_signs(seed, d)
    signs.setflags(write=False)
    return TransformSpec(kind=kind, d=d, seed=seed, signs=signs)


def _as_input(spec, x):
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] != spec.d:
        raise ShapeError(f"expected trailing dimension {spec.d}, got shape {x.shape}")
    if x.dtype == np.float32:
        return x
    if not np.issubdtype(x.dtype, np.number) or np.iscomplexobj(x):
        raise DataError(f"expected real input, got dtype {x.dtype}")
    return x.astype(np.float64, copy=False)


def _complex_dtype(real_dtype):
    return np.complex64 if real_dtype == np.float32 else np.complex128


def fft_stockham(z, inverse=False):
    """Unnormalized radix-2 Stockham FFT along the last axis.

    ``z`` must have a power-of-two trailing length. The autosort form needs no
    bit-reversal: each pass reads with stride ``s`` and writes interleaved.
    """
    z = np.asarray(z)
    n = z.shape[-1]
    if n & (n - 1):
        raise DimensionError(f"FFT length {n} is not a power of two")
    batch_shape = z.shape[:-1]
    dtype = z.dtype if np.iscomplexobj(z) else _complex_dtype(z.dtype)
    x = z.astype(dtype, copy=True).reshape(-1, n)
    b = x.shape[0]
    sign = 1.0 if inverse else -1.0
    m, s = n, 1
    while m > 1:
        h = m // 2
        w = np.exp(sign * 2j * np.pi * np.arange(h) / m).astype(dtype)
        xv = x.reshape(b, 2, h, s)
        a = xv[:, 0]
        c = xv[:, 1]
        y = np.empty((b, h, 2, s), dtype=dtype)
        y[:, :, 0, :] = a + c
        y[:, :, 1, :] = (a - c) * w[None, :, None]
        x = y.reshape(b, n)
        m, s = h, 2 * s
    return x.reshape(*batch_shape, n)


def _half_twiddle(d, dtype, inverse=False):
    # omega^k = exp(-2 pi i k / d) for k = 0..d/2-1
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 2j * np.pi * np.arange(d // 2) / d).astype(dtype)


def srft_forward(spec, x):
    """Apply the packed SRFT to ``x`` (shape ``(..., d)``)."""
    if spec.kind is not TransformKind.SRFT:
        raise ValueError(f"srft_forward needs an SRFT spec, got {spec.kind.value}")
    x = _as_input(spec, x)
    real = x.dtype
    cdt = _complex_dtype(real)
    d = spec.d
    n = d // 2
    xs = x * spec.signs.astype(real)
    z = xs[..., 0::2] + 1j * xs[..., 1::2]
    zf = fft_stockham(z.astype(cdt)) * real.type(1.0 / np.sqrt(n))

    # Hermitian unpack: X_k = E_k + w^k O_k with Z_N := Z_0.
    zr = np.roll(zf[..., ::-1], 1, axis=-1)  # Z_{N-k}
    zc = np.conj(zr)
    even = 0.5 * (zf + zc)
    odd = -0.5j * (zf - zc)
    xk = even + _half_twiddle(d, cdt) * odd  # k = 0..N-1, scaled by sqrt(2)
    nyq = (zf[..., 0].real - zf[..., 0].imag)  # X_N (real), same scaling

    out = np.empty(x.shape, dtype=real)
    inv_sqrt2 = real.type(1.0 / np.sqrt(2.0))
    out[..., 0] = xk[..., 0].real * inv_sqrt2
    out[..., n] = nyq * inv_sqrt2
    out[..., 1:n] = xk[..., 1:].real
    out[..., n + 1:] = xk[..., 1:].imag
    return out


def srft_inverse(spec, y):
    """Invert :func:`srft_forward`: unpack, inverse FFT, re-apply the signs."""
    if spec.kind is not TransformKind.SRFT:
        raise ValueError(f"srft_inverse needs an SRFT spec, got {spec.kind.value}")
    y = _as_input(spec, y)
    real = y.dtype
    cdt = _complex_dtype(real)
    d = spec.d
    n = d // 2
    sqrt2 = real.type(np.sqrt(2.0))

    xk = np.empty(y.shape[:-1] + (n + 1,), dtype=cdt)
    xk[..., 0] = y[..., 0] * sqrt2
    xk[..., n] = y[..., n] * sqrt2
    xk[..., 1:n] = y[..., 1:n] + 1j * y[..., n + 1:]

    head = xk[..., :n]
    mirror = np.conj(xk[..., n:0:-1])  # conj(X_{N-k}) for k = 0..N-1
    even = 0.5 * (head + mirror)
    odd = 0.5 * (head - mirror) * _half_twiddle(d, cdt, inverse=True)
    zf = even + 1j * odd
    z = fft_stockham(zf, inverse=True) * real.type(1.0 / np.sqrt(n))

    out = np.empty(y.shape, dtype=real)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    out *= spec.signs.astype(real)
    return out


def _fwht(x):
    d = x.shape[-1]
    batch_shape = x.shape[:-1]
    y = x.reshape(-1, d)
    b = y.shape[0]
    h = 1
    while h < d:
        yv = y.reshape(b, d // (2 * h), 2, h)
        a = yv[:, :, 0, :]
        c = yv[:, :, 1, :]
        y = np.stack((a + c, a - c), axis=2).reshape(b, d)
        h *= 2
    return y.reshape(*batch_shape, d)


def srht_forward(spec, x):
    """``H_d @ diag(s) @ x / sqrt(d)``."""
    if spec.kind is not TransformKind.SRHT:
        raise ValueError(f"srht_forward needs an SRHT spec, got {spec.kind.value}")
    x = _as_input(spec, x)
    real = x.dtype
    y = _fwht(x * spec.signs.astype(real))
    return y * real.type(1.0 / np.sqrt(spec.d))


def srht_inverse(spec, y):
    """Transpose of :func:`srht_forward` (H is symmetric)."""
    if spec.kind is not TransformKind.SRHT:
        raise ValueError(f"srht_inverse needs an SRHT spec, got {spec.kind.value}")
    y = _as_input(spec, y)
    real = y.dtype
    x = _fwht(y) * real.type(1.0 / np.sqrt(spec.d))
    return x * spec.signs.astype(real)


def forward(spec, x):
    """Dispatch on ``spec.kind``; ``spec=None`` means identity."""
    if spec is None or spec.kind is TransformKind.IDENTITY:
        if spec is None:
            return np.asarray(x)
        return _as_input(spec, x).copy()
    if spec.kind is TransformKind.SRFT:
        return srft_forward(spec, x)
    return srht_forward(spec, x)


def inverse(spec, y):
    """Inverse of :func:`forward`."""
    if spec is None or spec.kind is TransformKind.IDENTITY:
        if spec is None:
            return np.asarray(y)
        return _as_input(spec, y).copy()
    if spec.kind is TransformKind.SRFT:
        return srft_inverse(spec, y)
    return srht_inverse(spec, y)


def gaussianization_score(spec, X):
    """Pooled excess kurtosis of ``X`` before and after the transform.

    Returns ``(kurtosis_before, kurtosis_after)``. Raises
    :class:`~srftkv.errors.UndefinedMomentError` for a constant batch.
    """
    from .diagnostics import excess_kurtosis

    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        raise DataError("empty batch")
    before = excess_kurtosis(X)
    after = excess_kurtosis(forward(spec, X))
    return before, after
