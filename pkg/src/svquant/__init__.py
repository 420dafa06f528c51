"""Hybrid scalar/vector post-training weight quantization toolkit."""

from .errors import (
    BudgetError,
    ConfigError,
    DataError,
    FormatError,
    IoError,
    NumericalError,
    ShapeError,
    SvquantError,
    ValidationError,
)
from .proxy import (
    Method,
    PlanEntry,
    ProxyScores,
    QuantPlan,
    calibrate_thresholds,
    coarse_proxy,
    fine_proxy,
    intervals,
    plan,
    score_tensor,
    select_method,
)
from .squant import (
    CalibrationSet,
    SQTensor,
    gptq_quantize,
    sq_bpw,
    sq_dequantize,
    sq_quantize_rtn,
)
from .tensor_store import (
    ModelBundle,
    QuantConfig,
    TensorKind,
    WeightTensor,
    load_bundle,
    save_bundle,
)
from .vquant import (
    ActivationSummary,
    Codebook,
    VQTensor,
    activation_summary,
    kmeans_codebook,
    quantize_elementwise_mul,
    relative_cluster_loss,
    vq_assign,
    vq_bpw,
    vq_compensated,
    vq_dequantize,
    vq_quantize,
    weighted_codebook,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationSummary",
    "BudgetError",
    "CalibrationSet",
    "Codebook",
    "ConfigError",
    "DataError",
    "FormatError",
    "IoError",
    "Method",
    "ModelBundle",
    "NumericalError",
    "PlanEntry",
    "ProxyScores",
    "QuantConfig",
    "QuantPlan",
    "SQTensor",
    "ShapeError",
    "SvquantError",
    "TensorKind",
    "VQTensor",
    "ValidationError",
    "WeightTensor",
    "activation_summary",
    "calibrate_thresholds",
    "coarse_proxy",
    "fine_proxy",
    "gptq_quantize",
    "intervals",
    "kmeans_codebook",
    "load_bundle",
    "plan",
    "quantize_elementwise_mul",
    "relative_cluster_loss",
    "save_bundle",
    "score_tensor",
    "select_method",
    "sq_bpw",
    "sq_dequantize",
    "sq_quantize_rtn",
    "vq_assign",
    "vq_bpw",
    "vq_compensated",
    "vq_dequantize",
    "vq_quantize",
    "weighted_codebook",
    "__version__",
]
