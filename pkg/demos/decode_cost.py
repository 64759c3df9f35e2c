"""Bandwidth-vs-overhead picture of a decode step, and where int4 stops paying off."""
from srftkv.kvcache import CacheConfig, simulate_decode
from srftkv.models import load_model_config
from srftkv.perfmodel import CostModel, decode_step_cost
from srftkv.quantizer import QuantScheme

m = CostModel()
geo = dict(d=128, n_layers=28, n_kv_heads=2)
print("KV cache only, 3x compression")
for prefix in (256, 1024, 4096, 16384):
    c = decode_step_cost(m, prefix_len=prefix, ratio=3.0, **geo)
    print(f"  prefix {prefix:6d}: delta {c.delta_pct:+7.2f}%  crossover {c.crossover_overhead_ns_per_vec:9.0f} ns/vec")

print("\nwith weights streamed, per-channel-group g=32, W=16")
for name in ("qwen2.5-1.5b", "gemma-3-1b"):
    model = load_model_config(name)
    d = model.head_dim
    cfg = CacheConfig(d=d, n_layers=model.n_layers, n_kv_heads=model.n_kv_heads,
                      scheme=QuantScheme(4, "per_channel_group", d, 32), window=16,
                      lambda_source="calibrated")
    cells = []
    for prefix in (256, 1024, 2048, 4096):
        s = simulate_decode(cfg, prefix, 64, m, layer_windows=model.layer_windows(),
                            other_bytes=model.weight_bytes).summary
        cells.append(f"{prefix}: {s['delta_pct']:+.2f}%")
    print(f"  {model.name:<14} " + "  ".join(cells))
