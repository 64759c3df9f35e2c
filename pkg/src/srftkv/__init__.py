"""Rotate-then-quantize KV-cache compression.

Sign-randomized Fourier (SRFT) and Hadamard (SRHT) transforms, uniform
symmetric quantization with int4 nibble packing, calibration of
per-coordinate scales and learned rotations, a residual-window KV cache and
a bandwidth cost model, plus brute-force oracles for all of them.
"""

from .calibration import (
    CalibConfig,
    FitReport,
    Pipeline,
    RotationKind,
    RotationParams,
    expm_skew,
    fit,
    householder_compose,
    lambda_from_channel_max,
    reconstruction_mse,
)
from .diagnostics import (
    ActivationBatch,
    Profile,
    argmax_entropy,
    energy_concentration,
    excess_kurtosis,
    synth_activations,
)
from .errors import (
    ConfigError,
    DataError,
    DegenerateReflectorError,
    DimensionError,
    DivergenceError,
    FormatError,
    RangeError,
    ShapeError,
    SrftkvError,
    UndefinedMomentError,
)
from .kvcache import CacheConfig, KvCache, KvCacheLayer, LambdaSource, memory_report, simulate_decode
from .models import ModelConfig, load_model_config, memtable
from .perfmodel import BenchResult, CostModel, decode_step_cost, flops_per_vec, microbench
from .quantizer import (
    Granularity,
    QuantizedBlock,
    QuantScheme,
    compression_ratio,
    dequantize,
    pack_nibbles,
    quantize,
    unpack_nibbles,
)
from .transform import (
    TransformKind,
    TransformSpec,
    gaussianization_score,
    inverse,
    forward,
    make_spec,
    srft_forward,
    srft_inverse,
    srht_forward,
    srht_inverse,
)

__version__ = "0.1.0"
