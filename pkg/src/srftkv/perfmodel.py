"""Bandwidth cost model for decode steps and a small microbenchmark harness.

Decode on a unified-memory machine is dominated by streaming the KV cache
(and the weights) once per generated token. The model prices a step as::

    ns = bytes_streamed / bandwidth + n_kernel_vec * overhead + dispatch

with ``bandwidth`` in GB/s (numerically bytes per ns). The int4 path streams
compressed bytes and pays the per-vector kernel overhead plus one dispatch;
the fp16 path streams full bytes and pays neither.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import statistics
import subprocess
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import transform as tr
from .errors import ConfigError, RangeError
from .kvconfig import parse_float, read_kv
from .quantizer import Granularity, QuantScheme, bytes_per_vector, compression_ratio, quantize

__all__ = [
    "CostModel",
    "DecodeCost",
    "BenchResult",
    "flops_per_vec",
    "decode_step_cost",
    "microbench",
    "ledger_append",
    "write_bench_csv",
    "LEDGER_SCHEMA",
]

LEDGER_SCHEMA = 1
FP16_BYTES = 2


@dataclass(frozen=True)
class CostModel:
    """Hardware constants; defaults are M1-flavored."""

    bandwidth_GBps: float = 60.0
    overhead_ns_per_vec: dict = field(default_factory=lambda: {64: 13.0, 128: 25.0, 256: 50.0})
    dispatch_ns: float = 2000.0

    def __post_init__(self):
        if not self.bandwidth_GBps > 0:
            raise ConfigError("bandwidth_GBps must be > 0")
        if self.dispatch_ns < 0:
            raise ConfigError("dispatch_ns must be >= 0")
        if any(v < 0 for v in self.overhead_ns_per_vec.values()):
            raise ConfigError("overhead_ns_per_vec entries must be >= 0")

    def overhead(self, d):
        """Per-vector kernel cost at ``d``; unknown sizes scale linearly from the nearest entry."""
        table = self.overhead_ns_per_vec
        if d in table:
            return float(table[d])
        if not table:
            raise ConfigError("empty overhead table")
        near = min(table, key=lambda k: abs(math.log2(k) - math.log2(d)))
        return float(table[near]) * d / near

    def transfer_ns(self, n_bytes):
        return n_bytes / self.bandwidth_GBps

    @classmethod
    def load(cls, path):
        """Read ``bandwidth_GBps``, ``dispatch_ns`` and ``overhead_ns_per_vec = 64:13, 128:25``."""
        values = read_kv(path)
        base = cls()
        table = dict(base.overhead_ns_per_vec)
        if "overhead_ns_per_vec" in values:
            table = {}
            for item in values["overhead_ns_per_vec"].split(","):
                try:
                    k, v = item.split(":")
                    table[int(k)] = float(v)
                except ValueError:
                    raise ConfigError(f"bad overhead entry {item!r}") from None
        for key in values:
            if key.startswith("overhead_ns_per_vec."):
                table[int(key.split(".", 1)[1])] = parse_float(values, key)
        return cls(
            bandwidth_GBps=parse_float(values, "bandwidth_GBps", base.bandwidth_GBps),
            overhead_ns_per_vec=table,
            dispatch_ns=parse_float(values, "dispatch_ns", base.dispatch_ns),
        )

    def as_dict(self):
        return {
            "bandwidth_GBps": self.bandwidth_GBps,
            "overhead_ns_per_vec": {str(k): v for k, v in sorted(self.overhead_ns_per_vec.items())},
            "dispatch_ns": self.dispatch_ns,
        }


def flops_per_vec(d):
    """FLOP convention for one transform: ``5 * d * log2(d)``."""
    d = int(d)
    if d <= 0 or d & (d - 1):
        raise RangeError(f"d={d} is not a power of two")
    return 5 * d * (d.bit_length() - 1)


@dataclass
class DecodeCost:
    ns_fp16: float
    ns_int4: float
    delta_pct: float
    bytes_fp16: float
    bytes_int4: float
    n_kernel_vec: int
    overhead_ns_per_vec: float
    crossover_overhead_ns_per_vec: float

    def as_dict(self):
        return asdict(self)


def decode_step_cost(model, *, d, n_layers, n_kv_heads, prefix_len, scheme=None, ratio=None,
                     n_kernel_vec=None, other_bytes=0, overhead_ns=None):
    """Price one decode step on both paths.

    ``ratio`` overrides the compression ratio implied by ``scheme`` (default
    int4 per-token). ``n_kernel_vec`` defaults to the amortized steady state
    of the residual-window cache: each layer quantizes and dequantizes one K
    and one V vector per head per token. ``other_bytes`` (e.g. the weights)
    is streamed by both paths.
    """
    if min(d, n_layers, n_kv_heads) <= 0 or prefix_len < 0 or other_bytes < 0:
        raise RangeError("sizes must be positive")
    if ratio is None:
        scheme = scheme or QuantScheme(4, Granularity.PER_TOKEN, d)
        ratio = float(compression_ratio(scheme))
    if ratio <= 0:
        raise RangeError("ratio must be > 0")
    if n_kernel_vec is None:
        n_kernel_vec = 2 * 2 * n_layers * n_kv_heads
    ovh = model.overhead(d) if overhead_ns is None else float(overhead_ns)
    kv_fp16 = 2 * n_layers * n_kv_heads * prefix_len * d * FP16_BYTES
    kv_int4 = kv_fp16 / ratio
    ns_fp16 = model.transfer_ns(kv_fp16 + other_bytes)
    ns_int4 = model.transfer_ns(kv_int4 + other_bytes) + n_kernel_vec * ovh + model.dispatch_ns
    saved_ns = model.transfer_ns(kv_fp16 - kv_int4)
    crossover = (saved_ns - model.dispatch_ns) / n_kernel_vec if n_kernel_vec else math.inf
    return DecodeCost(
        ns_fp16=ns_fp16,
        ns_int4=ns_int4,
        delta_pct=100.0 * (ns_int4 - ns_fp16) / ns_fp16 if ns_fp16 > 0 else 0.0,
        bytes_fp16=kv_fp16 + other_bytes,
        bytes_int4=kv_int4 + other_bytes,
        n_kernel_vec=int(n_kernel_vec),
        overhead_ns_per_vec=ovh,
        crossover_overhead_ns_per_vec=crossover,
    )


# -- microbenchmark ---------------------------------------------------------


@dataclass
class BenchResult:
    label: str
    d: int
    bits: int
    n_vec: int
    ns_per_vec: float
    gflops: float
    GBps: float
    repeats: int
    dispersion: float
    flagged: bool = False
    flag_reason: str = ""

    def as_dict(self):
        return asdict(self)


def _pin_one_cpu():
    try:
        cpus = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {min(cpus)})
        return cpus
    except (AttributeError, OSError):
        return None


def _unpin(cpus):
    if cpus is not None:
        try:
            os.sched_setaffinity(0, cpus)
        except OSError:
            pass


def microbench(d, bits, n_vec_sweep, repeats=5, seed=0, warmup=1, transform="srft"):
    """Time transform + quantize over a sweep of batch sizes.

    Each point is the median of ``repeats`` timed runs after ``warmup``
    untimed ones. ``dispersion`` is (max - min) / median; a result is flagged
    when it cannot be trusted (fewer than two repeats, or a run shorter than
    a few timer ticks).
    """
    if repeats < 1:
        raise RangeError("repeats must be >= 1")
    spec = tr.make_spec(transform, d, seed)
    scheme = QuantScheme(bits, Granularity.PER_TOKEN, d)
    rng = np.random.default_rng(seed)
    tick = time.get_clock_info("perf_counter").resolution * 1e9
    out_bytes = float(bytes_per_vector(scheme))
    results = []
    saved = _pin_one_cpu()
    try:
        for n_vec in n_vec_sweep:
            if n_vec < 1:
                raise RangeError("n_vec must be >= 1")
            X = rng.standard_normal((n_vec, d)).astype(np.float32)
            for _ in range(warmup):
                quantize(scheme, tr.forward(spec, X))
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter_ns()
                quantize(scheme, tr.forward(spec, X))
                times.append(time.perf_counter_ns() - t0)
            med = statistics.median(times)
            ns = med / n_vec
            reasons = []
            if repeats < 2:
                reasons.append("fewer than 2 repeats")
            if min(times) < 100 * max(tick, 1.0):
                reasons.append("run shorter than 100 timer ticks")
            results.append(BenchResult(
                label=f"{spec.kind.value}+int{bits} d={d}",
                d=d,
                bits=bits,
                n_vec=int(n_vec),
                ns_per_vec=ns,
                gflops=flops_per_vec(d) / ns,
                GBps=(4 * d + out_bytes) / ns,
                repeats=repeats,
                dispersion=(max(times) - min(times)) / med if med > 0 else 0.0,
                flagged=bool(reasons),
                flag_reason="; ".join(reasons),
            ))
    finally:
        _unpin(saved)
    return results


def _git_hash(cwd=None):
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=cwd, timeout=5, check=False)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def ledger_append(path, command, config, results, git_hash=None):
    """Append one record keyed by (command, config hash, git hash).

    Returns ``False`` without writing when the key is already present, so
    reruns of the same configuration at the same revision are idempotent.
    """
    git_hash = git_hash or _git_hash()
    key = {"command": command, "config_hash": config_hash(config), "git_hash": git_hash}
    if os.path.exists(path):
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if all(rec.get(k) == v for k, v in key.items()):
                    return False
    record = {"schema": LEDGER_SCHEMA, **key, "config": config,
              "results": [r.as_dict() if hasattr(r, "as_dict") else r for r in results]}
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return True


def write_bench_csv(path, results):
    rows = [r.as_dict() for r in results]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
