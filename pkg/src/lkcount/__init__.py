"""lkcount: large-kernel count regression with verifiable branch fusion.

A small, deterministic numerics core (tensors, conv/BN/pool/linear ops with
reverse-mode gradients, Adam), structural re-parameterization of parallel
conv+BN branches into single kernels, the patch-shuffle RSY augmentation,
a configurable large-kernel counting model, and an end-to-end synthetic
training/evaluation pipeline with diagnostics.
"""

__version__ = "0.1.0"

from .ops import AdamState, BatchNormParams, ConvSpec, LinearParams, ShapeError  # noqa: F401
from .rng import Rng, derive_seed  # noqa: F401
