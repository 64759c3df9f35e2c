"""Brute-force references for the fast paths.

Nothing here calls into the transform or quantizer implementations; only the
plain data types are shared. Everything runs in float64 and favours being
obviously correct over being fast.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, RangeError, ShapeError
from .quantizer import QuantizedBlock
from .transform import TransformKind

__all__ = [
    "dense_srft_matrix",
    "dense_srht_matrix",
    "dense_matrix",
    "scalar_quantize_reference",
    "crossval",
    "dft8_as_matmul",
    "TIE_TOL",
]

DENSE_MAX_D = 1024
# A code mismatch counts as a tie when value/scale sits this close (in LSB)
# to a half-integer.
TIE_TOL = 1e-3
_LAM_FLOOR = 1e-6


def dense_srft_matrix(spec):
    """``pack(F @ diag(s))`` as an explicit ``d x d`` matrix, by direct DFT summation."""
    d = spec.d
    if d > DENSE_MAX_D:
        raise RangeError(f"dense oracle limited to d <= {DENSE_MAX_D}")
    half = d // 2
    s = np.asarray(spec.signs, dtype=np.float64)
    M = np.zeros((d, d))
    for k in range(half + 1):
        re = np.zeros(d)
        im = np.zeros(d)
        for n in range(d):
            theta = 2.0 * math.pi * ((k * n) % d) / d
            re[n] = math.cos(theta) / math.sqrt(d)
            im[n] = -math.sin(theta) / math.sqrt(d)
        if k == 0:
            M[0] = re
        elif k == half:
            M[half] = re
        else:
            M[k] = math.sqrt(2.0) * re
            M[half + k] = math.sqrt(2.0) * im
    return M * s[None, :]


def dense_srht_matrix(spec):
    """``H_d @ diag(s) / sqrt(d)`` with ``H_d`` built by Kronecker products."""
    d = spec.d
    if d > DENSE_MAX_D:
        raise RangeError(f"dense oracle limited to d <= {DENSE_MAX_D}")
    H = np.ones((1, 1))
    h2 = np.array([[1.0, 1.0], [1.0, -1.0]])
    while H.shape[0] < d:
        H = np.kron(H, h2)
    return H / math.sqrt(d) * np.asarray(spec.signs, dtype=np.float64)[None, :]


def dense_matrix(spec):
    if spec.kind is TransformKind.SRFT:
        return dense_srft_matrix(spec)
    if spec.kind is TransformKind.SRHT:
        return dense_srht_matrix(spec)
    return np.eye(spec.d)


def _round_away(r):
    # math.floor on a float64; ties go away from zero.
    a = abs(r)
    f = math.floor(a)
    q = f + 1 if a - f >= 0.5 else f
    return -q if r < 0 else q


def scalar_quantize_reference(scheme, X, lam=None):
    """Straight-line scalar quantizer in float64; returns a :class:`QuantizedBlock`.

    Scales are rounded to float32 only when stored; codes are computed from
    the float64 scale.
    """
    return _reference(scheme, X, lam)[0]


def _reference(scheme, X, lam):
    # Returns (block, value/scale ratios, float64 scales).
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    n, d = X.shape
    if d != scheme.d:
        raise ShapeError(f"expected d={scheme.d}, got {d}")
    gran = scheme.granularity
    if gran.needs_lambda != (lam is not None):
        raise ConfigError("lambda presence does not match the scheme")
    qm = 2 ** (scheme.bits - 1) - 1

    w = [[float(X[t, i]) for i in range(d)] for t in range(n)]
    lam_out = None
    if lam is not None:
        lam_list = [max(float(v), _LAM_FLOOR) for v in np.asarray(lam).ravel()]
        if len(lam_list) != d:
            raise ShapeError("lambda length mismatch")
        for t in range(n):
            for i in range(d):
                w[t][i] = w[t][i] * lam_list[i]
        lam_out = np.array(lam_list, dtype=np.float32)

    # Enumerate scaling units as lists of (t, i) index ranges.
    if gran.block_scale:
        units = [[(t, i) for t in range(n) for i in range(d)]]
    elif gran.grouped:
        g = scheme.group
        units = [[(t, i) for i in range(j, j + g)] for t in range(n) for j in range(0, d, g)]
    else:
        units = [[(t, i) for i in range(d)] for t in range(n)]

    codes = [[0] * d for _ in range(n)]
    ratio = np.zeros((n, d))
    scales = []
    for unit in units:
        amax = 0.0
        for t, i in unit:
            if abs(w[t][i]) > amax:
                amax = abs(w[t][i])
        scale = amax / qm
        scales.append(scale)
        for t, i in unit:
            if scale == 0.0:
                c = 0
            else:
                r = w[t][i] / scale
                ratio[t, i] = r
                c = _round_away(r)
            c = max(-qm, min(qm, c))
            codes[t][i] = c

    if scheme.packed:
        raw = np.zeros((n, d // 2), dtype=np.uint8)
        for t in range(n):
            for i in range(d // 2):
                lo = codes[t][2 * i] & 0xF
                hi = (codes[t][2 * i + 1] & 0xF) << 4
                raw[t, i] = hi | lo
    else:
        raw = np.zeros((n, d), dtype=np.uint8)
        for t in range(n):
            for i in range(d):
                raw[t, i] = codes[t][i] & 0xFF
    if gran.block_scale:
        sc = np.array(scales, dtype=np.float32).reshape(1, 1)
    else:
        sc = np.array(scales, dtype=np.float32).reshape(n, -1)
    block = QuantizedBlock(codes=raw, scales=sc, n_vec=n, scheme=scheme, lam=lam_out)
    return block, ratio, np.array(scales, dtype=np.float64).reshape(sc.shape)


def crossval(scheme, n_values=10 ** 6, seed=0, quantize_fn=None, distribution="normal"):
    """Compare a fast quantizer against :func:`scalar_quantize_reference`.

    ``quantize_fn(scheme, X, lam)`` defaults to :func:`srftkv.quantizer.quantize`.
    Returns a report with the share of identical integer codes, how many of
    the mismatches are half-LSB ties, and the worst relative scale error.
    """
    if quantize_fn is None:
        from .quantizer import quantize as quantize_fn
    d = scheme.d
    n_vec = max(1, -(-n_values // d))
    rng = np.random.default_rng(seed)
    if distribution == "normal":
        X = rng.standard_normal((n_vec, d))
    else:
        X = rng.uniform(-1.0, 1.0, (n_vec, d))
    X = X.astype(np.float32)
    lam = None
    if scheme.granularity.needs_lambda:
        lam = (1.0 / np.maximum(np.abs(X).max(axis=0), _LAM_FLOOR)).astype(np.float32)

    fast = quantize_fn(scheme, X, lam)
    ref, ratio, ref64 = _reference(scheme, X, lam)
    fc = _signed_codes(fast)
    rc = _signed_codes(ref)
    mismatch = np.argwhere(fc != rc)
    n_ties = 0
    for t, i in mismatch:
        r = abs(ratio[t, i])
        if abs((r - math.floor(r)) - 0.5) <= TIE_TOL and abs(int(fc[t, i]) - int(rc[t, i])) == 1:
            n_ties += 1
    fs = np.asarray(fast.scales, dtype=np.float64)
    nz = ref64 > 0
    rel = np.abs(fs[nz] - ref64[nz]) / ref64[nz]
    zero_ok = bool(np.all(fs[~nz] == 0.0))
    n_cmp = fc.size
    return {
        "config": {"d": d, "bits": scheme.bits, "scheme": scheme.granularity.value,
                   "group": scheme.group, "seed": seed, "n_vec": n_vec},
        "n_compared": int(n_cmp),
        "n_mismatch": int(len(mismatch)),
        "pct_identical": 100.0 * (n_cmp - len(mismatch)) / n_cmp,
        "n_ties": int(n_ties),
        "max_scale_rel_err": float(rel.max()) if rel.size else 0.0,
        "zero_scales_agree": zero_ok,
    }


def _signed_codes(block):
    d = block.scheme.d
    raw = np.asarray(block.codes, dtype=np.uint8)
    if block.scheme.packed:
        lo = (raw & 0xF).astype(np.int16)
        hi = (raw >> 4).astype(np.int16)
        out = np.empty((raw.shape[0], d), dtype=np.int16)
        out[:, 0::2] = np.where(lo >= 8, lo - 16, lo)
        out[:, 1::2] = np.where(hi >= 8, hi - 16, hi)
        return out
    v = raw.astype(np.int16)
    return np.where(v >= 128, v - 256, v)


def dft8_as_matmul(n_trials=1000, seed=0):
    """The length-8 complex DFT as a 16x16 real matrix on interleaved (re, im).

    Unnormalized: rows ``2k, 2k+1`` against columns ``2n, 2n+1`` hold
    ``[[cos t, sin t], [-sin t, cos t]]`` with ``t = 2 pi k n / 8``. Returns
    ``(M, report)``; the report checks ``M`` against direct summation.
    """
    N = 8
    M = np.zeros((2 * N, 2 * N))
    for k in range(N):
        for n in range(N):
            t = 2.0 * math.pi * ((k * n) % N) / N
            c, s = math.cos(t), math.sin(t)
            M[2 * k, 2 * n] = c
            M[2 * k, 2 * n + 1] = s
            M[2 * k + 1, 2 * n] = -s
            M[2 * k + 1, 2 * n + 1] = c

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        z = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        direct = [sum(z[n] * complex(math.cos(2 * math.pi * k * n / N), -math.sin(2 * math.pi * k * n / N))
                      for n in range(N)) for k in range(N)]
        v = np.empty(2 * N)
        v[0::2] = z.real
        v[1::2] = z.imag
        out = M @ v
        for k in range(N):
            worst = max(worst, abs(out[2 * k] - direct[k].real), abs(out[2 * k + 1] - direct[k].imag))

    imp = np.zeros(2 * N)
    imp[0] = 1.0
    flat = M @ imp
    gram = M.T @ M
    report = {
        "n_trials": n_trials,
        "max_abs_err": worst,
        "impulse_flat": bool(np.allclose(flat[0::2], 1.0, atol=1e-15) and np.allclose(flat[1::2], 0.0, atol=1e-15)),
        "gram_max_dev": float(np.abs(gram - N * np.eye(2 * N)).max()),
    }
    return M, report
