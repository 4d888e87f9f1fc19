"""Bit-error tolerance analysis for binarized neural networks.

Packed XNOR/popcount inference, transient bit-flip fault injection,
flip-injected training, and two tolerance metrics (per-position margins
and per-neuron importance dispersion), with exhaustive oracles for the
safety bound that links margins to tolerated flips.
"""

__version__ = "0.1.0"

from .bitcore import BitMatrix, pack_signs, unpack_signs, xnor_popcount_dot
from .errors import (
    ArchError,
    BittolError,
    DataFormatError,
    DivergenceError,
    ShapeError,
)
from .fault import FaultConfig, corrupted_read, sample_flip_mask
from .metrics import (
    BGrid,
    ImportanceReport,
    ToleranceReport,
    accuracy,
    accuracy_under_ber,
    dataset_tolerance,
    importance_variance,
    neuron_importance,
    position_tolerance,
    summary_tbar,
)
from .model import (
    BnnModel,
    fold_batchnorm,
    forward,
    forward_batch,
    maxpool2,
    random_model,
    threshold_activation,
)

__all__ = [
    "ArchError",
    "BGrid",
    "BitMatrix",
    "BittolError",
    "BnnModel",
    "DataFormatError",
    "DivergenceError",
    "FaultConfig",
    "ImportanceReport",
    "ShapeError",
    "ToleranceReport",
    "accuracy",
    "accuracy_under_ber",
    "corrupted_read",
    "dataset_tolerance",
    "fold_batchnorm",
    "forward",
    "forward_batch",
    "importance_variance",
    "maxpool2",
    "neuron_importance",
    "pack_signs",
    "position_tolerance",
    "random_model",
    "sample_flip_mask",
    "summary_tbar",
    "threshold_activation",
    "unpack_signs",
    "xnor_popcount_dot",
]
