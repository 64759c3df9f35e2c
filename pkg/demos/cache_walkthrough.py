"""Feed tokens through a residual-window cache and watch flushes, memo rebuilds and memory."""
import numpy as np

from srftkv.kvcache import CacheConfig, KvCacheLayer, memory_report
from srftkv.quantizer import QuantScheme

d, W = 128, 16
cfg = CacheConfig(d=d, scheme=QuantScheme(4, "per_channel_group", d, 32), window=W,
                  lambda_source="calibrated")
layer = KvCacheLayer(cfg)
rng = np.random.default_rng(0)
layer.calibrate(rng.standard_normal((256, d)), rng.standard_normal((256, d)))

K = rng.standard_normal((1024, d)).astype(np.float32)
V = rng.standard_normal((1024, d)).astype(np.float32)
for t in range(1024):
    layer.update(K[t:t + 1], V[t:t + 1])
    k, v = layer.read()
    if t + 1 in (1, 15, 16, 17, 64, 1024):
        c = layer.counters
        rep = memory_report(layer)
        print(f"tokens={t + 1:5d}  prefix={layer.n_prefix:5d}  residual={layer.n_residual:2d}  "
              f"flushes={c.flushes:3d}  rebuilds={c.dequant_rebuilds:3d}  ratio={rep['ratio']:.3f}x")

err = np.linalg.norm(k[:, 0] - K, axis=1) / np.linalg.norm(K, axis=1)
print(f"relative read-back error over 1024 tokens: median {np.median(err):.4f}, max {err.max():.4f}")

for W in (8, 16, 32, 64):
    cfg = CacheConfig(d=d, scheme=QuantScheme(4, "per_channel_group", d, 32), window=W,
                      lambda_source="calibrated")
    L = KvCacheLayer(cfg)
    L.calibrate(K[:256], V[:256])
    L.update(K, V)
    print(f"W={W:3d}: memory ratio at 1024 tokens {memory_report(L)['ratio']:.3f}x")
