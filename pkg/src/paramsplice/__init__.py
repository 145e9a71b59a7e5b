"""Toolkit for merging same-architecture model checkpoints by assessing
per-parameter compatibility and splicing the parameters into one model."""

from .autodiff import (
    DiffNode,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    elementwise,
    grad_check,
    leaf,
    matmul,
    reduce,
)
from .checkpoint import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointTruncationError,
    ParameterSet,
    load,
    save,
    validate_compatible,
)
from .compatibility import (
    AssessmentNetworks,
    CompatibilityMap,
    HistogramSpec,
    IdentityNetwork,
    ScalarNet,
    assess,
    blend,
    build_assessment_graph,
    entropy,
    global_information,
    histogram,
    local_uncertainty,
    normalize,
)
from .splicing import hard_splice, soft_splice, splice_for_training

__all__ = [name for name in dir() if not name.startswith("_")]

__version__ = "0.1.0"
