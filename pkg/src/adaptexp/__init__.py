"""Adaptive exponential quantization of DNN tensors.

Values are stored as a sign plus a small integer exponent of a per-layer base;
dot products are evaluated by counting exponent occurrences.
"""

from .distfit import HistogramFit, StartTensor, fit_histogram, fit_rss, select_start_tensor
from .expdot import (
    CounterSet,
    TermCoefficients,
    audit_counters,
    finalize,
    oracle_dot,
    precompute_weight_terms,
    quantized_matvec,
)
from .expquant import (
    QuantizedTensor,
    QuantParams,
    clip,
    dequantize_tensor,
    dequantize_value,
    init_params,
    quantize_tensor,
    quantize_value,
    rmae,
)
from .search import (
    LayerQuantResult,
    NetworkQuantReport,
    SearchConfig,
    compression_ratio,
    derive_partner_params,
    scale_activation_threshold,
    search_layer,
    search_network,
    search_optimal_base,
)
from .tensor import Tensor
from .tensorio import load_quantized, load_tensor, save_quantized, save_tensor

__all__ = [
    "CounterSet",
    "HistogramFit",
    "LayerQuantResult",
    "NetworkQuantReport",
    "QuantParams",
    "QuantizedTensor",
    "SearchConfig",
    "StartTensor",
    "Tensor",
    "TermCoefficients",
    "audit_counters",
    "clip",
    "compression_ratio",
    "dequantize_tensor",
    "dequantize_value",
    "derive_partner_params",
    "finalize",
    "fit_histogram",
    "fit_rss",
    "init_params",
    "load_quantized",
    "load_tensor",
    "oracle_dot",
    "precompute_weight_terms",
    "quantize_tensor",
    "quantize_value",
    "quantized_matvec",
    "rmae",
    "save_quantized",
    "save_tensor",
    "scale_activation_threshold",
    "search_layer",
    "search_network",
    "search_optimal_base",
    "select_start_tensor",
]

__version__ = "0.1.0"
