"""Per-layer KV-cache container with a full-precision residual window.

New tokens land in a ring buffer of ``window`` slots. When the buffer fills,
its contents are transformed, quantized as one block and appended to the
persistent prefix; the prefix is never re-quantized. ``read()`` serves the
dequantized, inverse-transformed prefix from a memo that is extended (never
rebuilt from scratch) after each flush, so every quantized token is
dequantized exactly once.

A cache instance is single-writer and not thread-safe; distinct layers are
independent.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import transform as tr
from .calibration import lambda_from_channel_max
from .errors import ConfigError, FormatError, ShapeError
from .quantizer import (Granularity, QuantizedBlock, QuantScheme, bytes_per_vector, dequantize,
                        quantize)

__all__ = [
    "LambdaSource",
    "CacheConfig",
    "CacheCounters",
    "KvCacheLayer",
    "KvCache",
    "memory_report",
    "save_snapshot",
    "load_snapshot",
    "DecodeTrace",
    "simulate_decode",
]

FP16_BYTES = 2
_SNAP_MAGIC = b"RKVS"
_SNAP_HEADER = struct.Struct("<4sIIII")
_STREAM_HEADER = struct.Struct("<IIII")


class LambdaSource(enum.Enum):
    NONE = "none"
    CALIBRATED = "calibrated"
    DYNAMIC = "dynamic"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown lambda source {value!r}") from None


@dataclass
class CacheConfig:
    d: int
    n_layers: int = 1
    n_kv_heads: int = 1
    scheme: QuantScheme | None = None
    window: int = 16
    lambda_source: LambdaSource = LambdaSource.NONE
    transform: tr.TransformKind = tr.TransformKind.SRFT
    seed: int = 0

    def __post_init__(self):
        if self.scheme is None:
            self.scheme = QuantScheme(4, Granularity.PER_TOKEN, self.d)
        if self.scheme.d != self.d:
            raise ConfigError(f"scheme d={self.scheme.d} != cache d={self.d}")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.n_layers < 1 or self.n_kv_heads < 1:
            raise ConfigError("n_layers and n_kv_heads must be >= 1")
        self.lambda_source = LambdaSource.parse(self.lambda_source)
        self.transform = tr.TransformKind.parse(self.transform)
        needs = self.scheme.granularity.needs_lambda
        if needs and self.lambda_source is LambdaSource.NONE:
            raise ConfigError(f"{self.scheme.granularity.value} needs a lambda source")
        if not needs and self.lambda_source is not LambdaSource.NONE:
            raise ConfigError(f"{self.scheme.granularity.value} does not use a lambda")

    def transform_spec(self, layer_idx, stream):
        return tr.make_spec(self.transform, self.d, self.seed * 1_000_003 + 2 * layer_idx + stream)


@dataclass
class CacheCounters:
    updates: int = 0
    flushes: int = 0
    dequant_rebuilds: int = 0
    dequant_vectors: int = 0
    quantized_vectors: int = 0
    bytes_persistent: int = 0


class _Stream:
    """One of the K or V halves of a layer."""

    def __init__(self, spec, lam=None):
        self.spec = spec
        self.lam = lam
        self.blocks = []
        self.memo = None
        self.memo_blocks = 0
        self.nbytes = 0  # running total over blocks

    def append(self, block):
        self.blocks.append(block)
        self.nbytes += block.nbytes


class KvCacheLayer:
    """Quantized prefix + residual window for one attention layer.

    Token tensors are ``(T, H, d)`` (or ``(T, d)`` when ``H == 1``).
    """

    def __init__(self, config, layer_idx=0, lambdas=None):
        self.config = config
        self.layer_idx = layer_idx
        self.counters = CacheCounters()
        self._streams = [_Stream(config.transform_spec(layer_idx, s)) for s in (0, 1)]
        self._residual = None
        self._res_len = 0
        self._n_prefix = 0
        if lambdas is not None:
            self.set_lambdas(*lambdas)

    # -- configuration -----------------------------------------------------

    @property
    def window(self):
        return self.config.window

    @property
    def n_tokens(self):
        return self._n_prefix + self._res_len

    @property
    def n_prefix(self):
        return self._n_prefix

    @property
    def n_residual(self):
        return self._res_len

    def set_lambdas(self, lam_k, lam_v):
        if self.config.lambda_source is not LambdaSource.CALIBRATED:
            raise ConfigError("lambdas can only be set for a calibrated lambda source")
        d = self.config.d
        for stream, lam in zip(self._streams, (lam_k, lam_v)):
            lam = np.asarray(lam, dtype=np.float32)
            if lam.shape != (d,):
                raise ShapeError(f"lambda must have shape ({d},), got {lam.shape}")
            stream.lam = lam.copy()
        self._refresh_bytes()

    def calibrate(self, k_batch, v_batch):
        """Set calibrated lambdas from per-channel maxima of transformed samples."""
        lams = []
        for stream, batch in zip(self._streams, (k_batch, v_batch)):
            x = np.asarray(batch, dtype=np.float32).reshape(-1, self.config.d)
            lams.append(lambda_from_channel_max(tr.forward(stream.spec, x)))
        self.set_lambdas(*lams)

    # -- update / read -------------------------------------------------------

    def _coerce(self, vecs):
        H, d = self.config.n_kv_heads, self.config.d
        a = np.asarray(vecs)
        if a.ndim == 2 and H == 1 and a.shape[1] == d:
            a = a[:, None, :]
        if a.ndim != 3 or a.shape[1:] != (H, d):
            raise ShapeError(f"expected token tensor (T, {H}, {d}), got {np.shape(vecs)}")
        return a

    def update(self, k_vecs, v_vecs):
        """Append tokens; flushes the window into the prefix each time it fills."""
        k = self._coerce(k_vecs)
        v = self._coerce(v_vecs)
        if k.shape != v.shape:
            raise ShapeError(f"K and V token counts differ: {k.shape} vs {v.shape}")
        if self._residual is None:
            dtype = np.result_type(k.dtype, v.dtype, np.float32)
            H, d = self.config.n_kv_heads, self.config.d
            self._residual = np.zeros((2, self.window, H, d), dtype=dtype)
        self.counters.updates += 1
        T = k.shape[0]
        pos = 0
        while pos < T:
            take = min(self.window - self._res_len, T - pos)
            sl = slice(self._res_len, self._res_len + take)
            self._residual[0, sl] = k[pos:pos + take]
            self._residual[1, sl] = v[pos:pos + take]
            self._res_len += take
            pos += take
            if self._res_len == self.window:
                self._flush()
        self._refresh_bytes()

    def _flush(self):
        d = self.config.d
        scheme = self.config.scheme
        for s, stream in enumerate(self._streams):
            window = self._residual[s, :self._res_len].reshape(-1, d)
            y = tr.forward(stream.spec, window.astype(np.float32))
            lam = None
            if self.config.lambda_source is LambdaSource.CALIBRATED:
                if stream.lam is None:
                    raise ConfigError(f"layer {self.layer_idx}: calibrated lambda not set")
                lam = stream.lam
            elif self.config.lambda_source is LambdaSource.DYNAMIC:
                lam = lambda_from_channel_max(y)
            block = quantize(scheme, y, lam)
            if self.config.lambda_source is LambdaSource.CALIBRATED:
                block.lam = None  # stored once per stream, not per block
            stream.append(block)
            self.counters.quantized_vectors += block.n_vec
        self._n_prefix += self._res_len
        self._res_len = 0
        self.counters.flushes += 1

    def _dequant_block(self, stream, block):
        lam = stream.lam if self.config.lambda_source is LambdaSource.CALIBRATED else None
        y = dequantize(block, lam)
        x = tr.inverse(stream.spec, y)
        H, d = self.config.n_kv_heads, self.config.d
        return x.reshape(-1, H, d)

    def _refresh_memo(self):
        stale = [st for st in self._streams if st.memo_blocks < len(st.blocks)]
        if not stale:
            return
        for stream in stale:
            new = [self._dequant_block(stream, b) for b in stream.blocks[stream.memo_blocks:]]
            self.counters.dequant_vectors += sum(b.n_vec for b in stream.blocks[stream.memo_blocks:])
            parts = ([stream.memo] if stream.memo is not None else []) + new
            stream.memo = np.concatenate(parts, axis=0)
            stream.memo_blocks = len(stream.blocks)
        self.counters.dequant_rebuilds += 1

    def memo_valid(self):
        return all(st.memo_blocks == len(st.blocks) for st in self._streams)

    def read(self):
        """Return ``(K, V)`` of shape ``(n_tokens, H, d)`` in insertion order."""
        self._refresh_memo()
        H, d = self.config.n_kv_heads, self.config.d
        dtype = np.float32 if self._residual is None else self._residual.dtype
        out = []
        for s, stream in enumerate(self._streams):
            prefix = stream.memo if stream.memo is not None else np.zeros((0, H, d), dtype=dtype)
            resid = (self._residual[s, :self._res_len] if self._residual is not None
                     else np.zeros((0, H, d), dtype=dtype))
            out.append(np.concatenate([prefix.astype(dtype, copy=False), resid], axis=0))
        return out[0], out[1]

    def fresh_prefix(self):
        """Dequantize the whole prefix from scratch, bypassing the memo (for checks)."""
        H, d = self.config.n_kv_heads, self.config.d
        res = []
        for stream in self._streams:
            parts = [self._dequant_block(stream, b) for b in stream.blocks]
            res.append(np.concatenate(parts, axis=0) if parts else np.zeros((0, H, d), np.float32))
        return res[0], res[1]

    def memo_arrays(self):
        return tuple(st.memo for st in self._streams)

    # -- accounting ------------------------------------------------------------

    def _refresh_bytes(self):
        self.counters.bytes_persistent = self.persistent_bytes()

    def persistent_bytes(self):
        """Quantized blocks + calibrated lambdas + the residual ring buffer at fp16."""
        H, d = self.config.n_kv_heads, self.config.d
        total = sum(st.nbytes for st in self._streams)
        if self.config.lambda_source is LambdaSource.CALIBRATED:
            total += sum(st.lam.nbytes for st in self._streams if st.lam is not None)
        total += 2 * self.window * H * d * FP16_BYTES
        return total

    def transient_bytes(self):
        H, d = self.config.n_kv_heads, self.config.d
        memo_tokens = sum(0 if st.memo is None else st.memo.shape[0] for st in self._streams)
        return memo_tokens * H * d * FP16_BYTES

    def fp16_equivalent_bytes(self):
        H, d = self.config.n_kv_heads, self.config.d
        return 2 * self.n_tokens * H * d * FP16_BYTES

    @property
    def streams(self):
        return tuple(self._streams)


class KvCache:
    """All layers of a model's KV cache."""

    def __init__(self, config, lambdas=None):
        self.config = config
        lambdas = lambdas or {}
        self.layers = [KvCacheLayer(config, i, lambdas.get(i)) for i in range(config.n_layers)]

    def update(self, layer_idx, k_vecs, v_vecs):
        self.layers[layer_idx].update(k_vecs, v_vecs)

    def read(self, layer_idx):
        return self.layers[layer_idx].read()

    def __len__(self):
        return len(self.layers)


def memory_report(cache):
    """Byte accounting for a :class:`KvCache` or a single :class:`KvCacheLayer`.

    The residual window is priced at its full capacity in fp16; the prefix
    memo is reported separately as transient memory.
    """
    layers = cache.layers if isinstance(cache, KvCache) else [cache]
    fp16 = sum(l.fp16_equivalent_bytes() for l in layers)
    actual = sum(l.persistent_bytes() for l in layers)
    transient = sum(l.transient_bytes() for l in layers)
    tokens = sum(l.n_tokens for l in layers)
    if tokens == 0:
        return {"bytes_fp16_equivalent": 0, "bytes_actual": actual, "bytes_transient": transient,
                "ratio": 1.0, "empty": True}
    return {"bytes_fp16_equivalent": fp16, "bytes_actual": actual, "bytes_transient": transient,
            "ratio": fp16 / actual, "empty": False}


def save_snapshot(cache, path):
    """Write every layer's blocks, lambdas and residual window to ``path``."""
    cfg = cache.config
    parts = [_SNAP_HEADER.pack(_SNAP_MAGIC, 1, cfg.n_layers, cfg.n_kv_heads, cfg.d)]
    for layer in cache.layers:
        for s, stream in enumerate(layer.streams):
            has_lam = int(stream.lam is not None)
            res = (layer._residual[s, :layer.n_residual] if layer._residual is not None
                   else np.zeros((0, cfg.n_kv_heads, cfg.d), np.float32))
            res_code = 8 if res.dtype == np.float64 else 4
            parts.append(_STREAM_HEADER.pack(len(stream.blocks), has_lam, res.shape[0], res_code))
            if has_lam:
                parts.append(np.asarray(stream.lam, "<f4").tobytes())
            for block in stream.blocks:
                raw = block.to_bytes()
                parts.append(struct.pack("<Q", len(raw)))
                parts.append(raw)
            parts.append(np.ascontiguousarray(res, dtype="<f8" if res_code == 8 else "<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_snapshot(path, config):
    """Rebuild a :class:`KvCache` written by :func:`save_snapshot` (counters reset)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n_layers, H, d = _SNAP_HEADER.unpack_from(raw)
    if magic != _SNAP_MAGIC or version != 1:
        raise FormatError("not a cache snapshot")
    if (n_layers, H, d) != (config.n_layers, config.n_kv_heads, config.d):
        raise FormatError("snapshot geometry does not match config")
    cache = KvCache(config)
    pos = _SNAP_HEADER.size
    for layer in cache.layers:
        residuals = []
        for stream in layer.streams:
            n_blocks, has_lam, n_res, res_code = _STREAM_HEADER.unpack_from(raw, pos)
            pos += _STREAM_HEADER.size
            if has_lam:
                stream.lam = np.frombuffer(raw, "<f4", d, pos).astype(np.float32)
                pos += 4 * d
            for _ in range(n_blocks):
                (size,) = struct.unpack_from("<Q", raw, pos)
                pos += 8
                block, pos = QuantizedBlock.from_bytes(raw, pos)
                stream.append(block)
            dt = "<f8" if res_code == 8 else "<f4"
            count = n_res * H * d
            residuals.append(np.frombuffer(raw, dt, count, pos).reshape(n_res, H, d))
            pos += count * np.dtype(dt).itemsize
        n_res = residuals[0].shape[0]
        layer._residual = np.zeros((2, config.window, H, d),
                                   dtype=np.float64 if residuals[0].dtype == np.float64 else np.float32)
        layer._residual[0, :n_res] = residuals[0]
        layer._residual[1, :n_res] = residuals[1]
        layer._res_len = n_res
        layer._n_prefix = sum(b.n_vec for b in layer.streams[0].blocks) // H
        layer._refresh_bytes()
    return cache


# -- decode simulation ---------------------------------------------------------


@dataclass
class DecodeTrace:
    records: list
    summary: dict

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")


def _block_bytes(config, n_vec):
    scheme = config.scheme
    per = bytes_per_vector(scheme)
    total = per * n_vec
    if scheme.granularity.block_scale:
        total += 4
    if config.lambda_source is LambdaSource.DYNAMIC:
        total += 4 * config.d
    return int(total)


def _price(cost_model, n_bytes, n_vec, d):
    ns = cost_model.transfer_ns(n_bytes)
    if n_vec:
        ns += n_vec * cost_model.overhead(d) + cost_model.dispatch_ns
    return ns


def simulate_decode(config, prefix_len, n_new, cost_model, *, layer_windows=None,
                    other_bytes=0):
    """Replay ``n_new`` decode steps after a ``prefix_len`` prefill, analytically.

    The per-layer state machine follows the cache contract exactly (flush when
    the window fills, incremental memo refresh on the first read after a
    flush) but tracks only counts, not values. Every ``update``/``flush``/
    ``read`` is priced with ``cost_model`` on the int4 path, and a fp16
    baseline that streams the full prefix each step is produced alongside.

    ``layer_windows`` marks sliding-attention layers: entry ``i`` is ``None``
    for a full-attention (quantized) layer or the attention window for a
    sliding layer. Sliding layers stay fp16 on the int4 path and only ever
    hold their window; the fp16 baseline keeps every token on every layer.
    ``other_bytes`` (the weights) is streamed once per step on both paths.
    """
    if prefix_len < 0 or n_new < 0:
        raise ValueError("prefix_len and n_new must be >= 0")
    L, H, d, W = config.n_layers, config.n_kv_heads, config.d, config.window
    if layer_windows is None:
        layer_windows = [None] * L
    if len(layer_windows) != L:
        raise ConfigError(f"layer_windows has {len(layer_windows)} entries for {L} layers")
    tok_fp16 = 2 * H * d * FP16_BYTES  # one token, K and V
    lam_bytes = 2 * 4 * d if config.lambda_source is LambdaSource.CALIBRATED else 0
    flush_vecs = 2 * W * H

    state = []
    for win in layer_windows:
        if win is None:
            n_flush = prefix_len // W
            state.append({"prefix": n_flush * W, "res": prefix_len % W, "memo": n_flush * W,
                          "flushes": 0, "rebuilds": 0, "qbytes": n_flush * 2 * _block_bytes(config, W * H)})
        else:
            state.append({"tokens": prefix_len})

    records = []
    totals = {"int4": 0.0, "fp16": 0.0}
    counts = {"update": 0, "read": 0, "flush": 0}
    for step in range(n_new):
        n_tokens = prefix_len + step + 1
        for li, win in enumerate(layer_windows):
            st = state[li]
            recs = [("int4", "update", tok_fp16, 0)]
            if win is None:
                st["res"] += 1
                if st["res"] == W:
                    blk = 2 * _block_bytes(config, W * H)
                    recs.append(("int4", "flush", W * tok_fp16 + blk, flush_vecs))
                    st["prefix"] += W
                    st["res"] = 0
                    st["flushes"] += 1
                    st["qbytes"] += blk
                    counts["flush"] += 1
                stale = 2 * (st["prefix"] - st["memo"]) * H
                if stale:
                    st["memo"] = st["prefix"]
                    st["rebuilds"] += 1
                read_bytes = st["qbytes"] + lam_bytes + st["res"] * tok_fp16
                recs.append(("int4", "read", read_bytes, stale))
            else:
                st["tokens"] = n_tokens
                recs.append(("int4", "read", min(n_tokens, win) * tok_fp16, 0))
            recs.append(("fp16", "update", tok_fp16, 0))
            recs.append(("fp16", "read", n_tokens * tok_fp16, 0))
            counts["update"] += 1
            counts["read"] += 1
            for path, op, nb, nv in recs:
                ns = _price(cost_model, nb, nv, d)
                totals[path] += ns
                records.append({"step": step, "layer": li, "op": op, "path": path,
                                "bytes": int(nb), "kernel_vec": int(nv), "ns_predicted": ns})
        if other_bytes:
            for path in ("int4", "fp16"):
                ns = cost_model.transfer_ns(other_bytes)
                totals[path] += ns
                records.append({"step": step, "layer": -1, "op": "weights", "path": path,
                                "bytes": int(other_bytes), "kernel_vec": 0, "ns_predicted": ns})

    full = [s for s, w in zip(state, layer_windows) if w is None]
    summary = {
        "prefix_len": prefix_len,
        "n_new": n_new,
        "n_layers": L,
        "n_quantized_layers": len(full),
        "updates": counts["update"],
        "reads": counts["read"],
        "flushes": counts["flush"],
        "flushes_per_layer": [s["flushes"] for s in full],
        "dequant_rebuilds_per_layer": [s["rebuilds"] for s in full],
        "empty": n_new == 0,
    }
    if n_new:
        ms_int4 = totals["int4"] / n_new / 1e6
        ms_fp16 = totals["fp16"] / n_new / 1e6
        summary.update(ms_per_tok_int4=ms_int4, ms_per_tok_fp16=ms_fp16,
                       delta_pct=100.0 * (ms_int4 - ms_fp16) / ms_fp16)
    else:
        summary.update(ms_per_tok_int4=0.0, ms_per_tok_fp16=0.0, delta_pct=0.0)
    final = prefix_len + n_new
    fp16_bytes = L * final * tok_fp16
    int4_bytes = 0
    for s, w in zip(state, layer_windows):
        if w is None:
            int4_bytes += s["qbytes"] + lam_bytes + W * tok_fp16
        else:
            int4_bytes += min(final, w) * tok_fp16
    summary["memory_ratio"] = fp16_bytes / int4_bytes if final else 1.0
    return DecodeTrace(records, summary)
