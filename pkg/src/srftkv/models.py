"""Model geometry for memory tables and decode simulation.

Geometry lives in small ``key = value`` files; presets for a handful of
public checkpoints ship in ``srftkv/presets``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources

from .errors import ConfigError
from .kvconfig import parse_int, read_kv
from .quantizer import Granularity, QuantScheme, bytes_per_vector

__all__ = ["ModelConfig", "load_model_config", "preset_path", "list_presets", "memtable", "GB"]

# Table convention: one "GB" is 1000 MiB.
GB = 1000 * 2 ** 20
FP16_BYTES = 2


@dataclass(frozen=True)
class ModelConfig:
    name: str
    n_layers: int
    n_kv_heads: int
    head_dim: int
    n_params: int = 0
    sliding_window: int = 0
    global_layers: tuple = ()

    def __post_init__(self):
        if min(self.n_layers, self.n_kv_heads, self.head_dim) < 1:
            raise ConfigError("n_layers, n_kv_heads and head_dim must be >= 1")
        if any(not 0 <= i < self.n_layers for i in self.global_layers):
            raise ConfigError("global layer index out of range")

    @property
    def weight_bytes(self):
        return FP16_BYTES * self.n_params

    def layer_windows(self):
        """Per-layer attention window (``None`` = full attention)."""
        if not self.sliding_window:
            return [None] * self.n_layers
        glob = set(self.global_layers)
        return [None if i in glob else self.sliding_window for i in range(self.n_layers)]

    def kv_bytes_fp16(self, ctx):
        return 2 * self.n_layers * self.n_kv_heads * self.head_dim * FP16_BYTES * ctx

    def kv_bytes(self, ctx, scheme):
        """Stored bytes for ``ctx`` tokens on every layer (large-block limit)."""
        per = bytes_per_vector(scheme)
        return Fraction(2 * self.n_layers * self.n_kv_heads * ctx) * per


def preset_path(name):
    path = resources.files("srftkv") / "presets" / f"{name.lower()}.cfg"
    if not path.is_file():
        raise ConfigError(f"no preset named {name!r}; have {', '.join(list_presets())}")
    return path


def list_presets():
    folder = resources.files("srftkv") / "presets"
    return sorted(p.name[:-4] for p in folder.iterdir() if p.name.endswith(".cfg"))


def load_model_config(path_or_name):
    """Load a model config file, or a preset by name (e.g. ``qwen2.5-1.5b``)."""
    path = str(path_or_name)
    if not os.path.isfile(path):
        path = str(preset_path(os.path.basename(path).removesuffix(".cfg")))
    values = read_kv(path)
    glob = values.get("global_layers", "").strip()
    try:
        global_layers = tuple(int(x) for x in glob.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad global_layers {glob!r}") from None
    return ModelConfig(
        name=values.get("name", path),
        n_layers=parse_int(values, "n_layers"),
        n_kv_heads=parse_int(values, "n_kv_heads"),
        head_dim=parse_int(values, "head_dim"),
        n_params=parse_int(values, "n_params", 0),
        sliding_window=parse_int(values, "sliding_window", 0),
        global_layers=global_layers,
    )


def memtable(model, contexts, scheme=None):
    """Rows of fp16 and quantized KV bytes (and GB) per context length."""
    scheme = scheme or QuantScheme(4, Granularity.PER_TOKEN, model.head_dim)
    rows = []
    for ctx in contexts:
        if ctx < 0:
            raise ConfigError("context length must be >= 0")
        fp16 = model.kv_bytes_fp16(ctx)
        quant = model.kv_bytes(ctx, scheme)
        rows.append({
            "model": model.name,
            "d": model.head_dim,
            "ctx": int(ctx),
            "bytes_fp16": int(fp16),
            "bytes_quant": int(quant),
            "gb_fp16": fp16 / GB,
            "gb_quant": float(quant) / GB,
            "scheme": scheme.label(),
        })
    return rows
