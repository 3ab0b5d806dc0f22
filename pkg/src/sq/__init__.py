"""Post-training quantization toolkit with channel salience balancing.

Core pieces: a uniform asymmetric quantizer, per-channel salience balancing
between activations and weights, rank-correlation-weighted aggregation of
activation statistics across sampler timesteps, lossless offline folding of
the balancing factors, a desk-scale transformer-block simulator to exercise
everything end to end, and a CLI pipeline (``sq``) with persistent artifacts.
"""

from .errors import (
    ArtifactLockError,
    ConfigError,
    ContainerFormatError,
    EmptyBatchError,
    EmptyVectorError,
    GranularityMismatchError,
    InvalidParamsError,
    InvalidProfileError,
    InvalidShapeError,
    LengthMismatchError,
    MissingArtifactError,
    NonFiniteInputError,
    ShapeMismatchError,
    SqError,
    TooShortError,
)
from .quant import (
    DEFAULT_SHRINK_GRID,
    Granularity,
    QuantParams,
    QuantizedTensor,
    dequantize,
    fake_quantize,
    fit_minmax,
    fit_mse_search,
    quant_error_mse,
    quantize,
)
from .salience import (
    BalancingPair,
    activation_salience,
    apply_balancing,
    balanced_salience,
    build_balancing,
    overall_salience,
    weight_salience,
)
from .temporal import (
    LayerCalibration,
    SpearmanWeights,
    TimestepActivations,
    average_ranks,
    calibrate_layer,
    eta_weights,
    spearman_rho,
    temporal_salience,
)
from .reparam import (
    AdaLNParams,
    EquivalenceReport,
    FoldedLinear,
    adaln_forward,
    balanced_adaln_forward,
    fold_adaln,
    fold_dequant_scales,
    fold_weight,
    verify_equivalence,
)
from .sim import (
    ChallengeReport,
    DiTBlockParams,
    SalienceProfile,
    challenge_report,
    forward_block,
    forward_stack,
    gen_calibration,
    init_block,
    init_stack,
)
from .estimators import SalienceBalancer, UniformQuantizer

__version__ = "0.1.0"

__all__ = [
    "ArtifactLockError",
    "ConfigError",
    "ContainerFormatError",
    "EmptyBatchError",
    "EmptyVectorError",
    "GranularityMismatchError",
    "InvalidParamsError",
    "InvalidProfileError",
    "InvalidShapeError",
    "LengthMismatchError",
    "MissingArtifactError",
    "NonFiniteInputError",
    "ShapeMismatchError",
    "SqError",
    "TooShortError",
    "DEFAULT_SHRINK_GRID",
    "Granularity",
    "QuantParams",
    "QuantizedTensor",
    "dequantize",
    "fake_quantize",
    "fit_minmax",
    "fit_mse_search",
    "quant_error_mse",
    "quantize",
    "BalancingPair",
    "activation_salience",
    "apply_balancing",
    "balanced_salience",
    "build_balancing",
    "overall_salience",
    "weight_salience",
    "LayerCalibration",
    "SpearmanWeights",
    "TimestepActivations",
    "average_ranks",
    "calibrate_layer",
    "eta_weights",
    "spearman_rho",
    "temporal_salience",
    "AdaLNParams",
    "EquivalenceReport",
    "FoldedLinear",
    "adaln_forward",
    "balanced_adaln_forward",
    "fold_adaln",
    "fold_dequant_scales",
    "fold_weight",
    "verify_equivalence",
    "ChallengeReport",
    "DiTBlockParams",
    "SalienceProfile",
    "challenge_report",
    "forward_block",
    "forward_stack",
    "gen_calibration",
    "init_block",
    "init_stack",
    "SalienceBalancer",
    "UniformQuantizer",
    "__version__",
]
