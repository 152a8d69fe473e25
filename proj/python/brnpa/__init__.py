"""Non-parametric attention: pick the most active feature vectors of a CNN
volume and refine each into a similarity-weighted average."""

from ._core import (
    AssertionFailure,
    DivergenceError,
    Error,
    FormatError,
    IoError,
    ShapeError,
    ValidationError,
    __version__,
    distillation_loss,
    extract_representatives,
    generate_shapes,
    render,
    similarity_map,
    sparsity,
    train,
)

__all__ = [
    "AssertionFailure",
    "DivergenceError",
    "Error",
    "FormatError",
    "IoError",
    "ShapeError",
    "ValidationError",
    "__version__",
    "distillation_loss",
    "extract_representatives",
    "generate_shapes",
    "render",
    "similarity_map",
    "sparsity",
    "train",
]
