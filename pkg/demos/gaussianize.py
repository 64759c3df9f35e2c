"""Outlier statistics of a synthetic heavy-tailed batch before and after the SRFT."""
import math

import numpy as np

from srftkv import transform as tr
from srftkv.diagnostics import argmax_entropy, energy_concentration, excess_kurtosis, synth_activations
from srftkv.quantizer import QuantScheme, dequantize, quantize

d = 256
for profile in ("heavy_tail_mixture", "dominant_coordinate", "laplace"):
    X = synth_activations(profile, 4096, d, seed=0).data
    spec = tr.make_spec("srft", d, seed=0)
    Y = tr.forward(spec, X)
    print(f"{profile}")
    print(f"  excess kurtosis   {excess_kurtosis(X):8.3f} -> {excess_kurtosis(Y):8.3f}")
    print(f"  argmax entropy    {argmax_entropy(X):8.3f} -> {argmax_entropy(Y):8.3f}   (ln d = {math.log(d):.3f})")
    print(f"  top-1% energy     {energy_concentration(X, 0.01):8.3f} -> {energy_concentration(Y, 0.01):8.3f}")

    # what this buys at 4 bits, per-token scales
    s = QuantScheme(4, "per_token", d)
    plain = np.mean(np.sum((dequantize(quantize(s, X)) - X) ** 2, axis=1))
    back = tr.inverse(spec, dequantize(quantize(s, Y)))
    rotated = np.mean(np.sum((back - X) ** 2, axis=1))
    print(f"  int4 per-token MSE {plain:8.4f} -> {rotated:8.4f}\n")
